use thiserror::Error;

use crate::numcore::NumError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("integration failed at step {step}: {source}")]
    Integration { step: usize, source: NumError },
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    CheckpointVersion { found: u16, supported: u16 },
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unknown dataset preset `{0}`")]
    UnknownPreset(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
