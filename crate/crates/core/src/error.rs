use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty graph")]
    EmptyGraph,
    #[error("invalid label {0:?}: {1}")]
    InvalidLabel(String, &'static str),
    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("no aligned tokens")]
    NoAlignedTokens,
    #[error("infinite SNR")]
    InfiniteSnr,
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical blow-up: {0}")]
    Numerical(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
