//! Shared fixtures for the integration suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uformer::dsp::Waveform;
use uformer::model::UFormerConfig;

/// Harmonic complex with pitch vibrato and a syllable-rate envelope; a
/// deterministic stand-in for voiced speech.
pub fn speechlike(seconds: f64, seed: u64) -> Waveform {
    let n = (seconds * 16000.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0_base: f64 = 110.0 + rng.gen_range(0.0..40.0);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / 16000.0;
            let f0 = f0_base * (1.0 + 0.15 * (2.0 * std::f64::consts::PI * 0.7 * t).sin());
            let syllable = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 3.1 * t).sin();
            let mut s = 0.0;
            for h in 1..=6 {
                s += (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64;
            }
            0.15 * syllable * s
        })
        .collect();
    Waveform::new(samples)
}

pub fn white(seconds: f64, seed: u64) -> Waveform {
    let n = (seconds * 16000.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
}

/// Reduced channel ladder for fast end-to-end runs; the architecture shape
/// (5 mirrored stages, skip gates, bottleneck attention) is unchanged.
pub fn small_config() -> UFormerConfig {
    UFormerConfig {
        enc_channels: vec![8, 16, 24, 32, 40],
        dec_channels: vec![32, 24, 16, 8, 1],
        heads: 4,
        span: 5,
        ..Default::default()
    }
}
