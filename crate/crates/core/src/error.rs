//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any primgraph module.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument violated a precondition (non-finite, non-positive, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Tensor or grid dimensions do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A metric is undefined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Bad configuration file or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// A file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A checkpoint was missing or malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
