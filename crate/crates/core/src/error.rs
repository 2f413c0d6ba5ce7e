use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid pattern: {0}")]
    InvalidPattern(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero power in {0} signal")]
    ZeroPower(&'static str),

    #[error("attention row {0} has no admissible columns")]
    EmptyMaskRow(usize),

    #[error("step must be >= 1")]
    ZeroStep,

    #[error("unsupported wav format: {0}")]
    WavFormat(String),

    #[error("checkpoint has bad magic bytes")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    Checksum,

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
