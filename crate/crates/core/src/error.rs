use thiserror::Error;

/// Errors produced by the pruning engine.
#[derive(Debug, Error)]
pub enum TrimError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("budget error: {0}")]
    Budget(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrimError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        TrimError::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        TrimError::Format(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        TrimError::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, TrimError>;
