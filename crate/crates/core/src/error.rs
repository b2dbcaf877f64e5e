use thiserror::Error;

/// Errors produced by the decomposition library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for dimension of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid mode {0}; expected 1, 2 or 3")]
    InvalidMode(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unidentifiable fiber: {0}")]
    UnidentifiableFiber(String),

    #[error("no observed entries")]
    EmptyData,

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed input at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
