//! Monaural speech enhancement around a complex-spectrogram U-Net with an
//! axial self-attention bottleneck, cross-attention skip gates, and a
//! learnable overlap-add synthesis decoder, trained with a joint
//! time-frequency loss.
//!
//! The crate is self-contained: a small reverse-mode tensor engine
//! ([`tensor`]), the STFT/mixing/metric DSP ([`dsp`]), the attention blocks
//! ([`attention`]), the network ([`model`]), losses ([`loss`]), the training
//! loop with checkpointing ([`train`]), and the verification suites
//! ([`verify`]) behind the `uformer` command line.

pub mod attention;
pub mod dsp;
pub mod error;
pub mod loss;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod model;
pub mod train;
pub mod verify;
pub mod tensor;
pub mod wav;

pub use error::{Error, Result};
