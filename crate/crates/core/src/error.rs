use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("duplicate vector id {0}")]
    DuplicateId(u64),

    #[error("non-finite component in row {row}")]
    NonFinite { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown cluster id {0}")]
    UnknownCluster(u32),

    #[error("fast tier capacity exceeded: need {needed} bytes, {available} available")]
    CapacityExceeded { needed: u64, available: u64 },

    #[error("malformed file at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
