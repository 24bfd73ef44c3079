use thiserror::Error;

/// Errors surfaced by the user-facing layers (audio I/O, configuration,
/// checkpoints, datasets, training, verification).
///
/// Tensor-level shape violations are programming errors and panic with a
/// message naming the offending shapes instead of threading `Result` through
/// every graph-building call.
#[derive(Debug, Error)]
pub enum Error {
    #[error("wav: {0}")]
    Wav(String),
    #[error("dsp: {0}")]
    Dsp(String),
    #[error("config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("model: {0}")]
    Model(String),
    #[error("train: {0}")]
    Train(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Verify(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
