use std::io;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum IicError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("degenerate norm: cannot normalize a zero-length feature")]
    DegenerateNorm,
    #[error("stale activation cache: built for parameter version {cached}, current is {current}")]
    StaleCache { cached: u64, current: u64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl IicError {
    /// Coarse category used by front ends to pick an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            IicError::InvalidArgument(_) | IicError::Config(_) => ErrorKind::Usage,
            IicError::DegenerateNorm | IicError::NonFinite(_) => ErrorKind::Numeric,
            IicError::Shape(_)
            | IicError::IndexOutOfRange { .. }
            | IicError::StaleCache { .. }
            | IicError::Format(_)
            | IicError::Data(_)
            | IicError::Io(_) => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

pub type Result<T> = std::result::Result<T, IicError>;
