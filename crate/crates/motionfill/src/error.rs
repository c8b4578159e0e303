use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented invariant (bad shapes, out-of-range values,
    /// infeasible configs). Maps to CLI exit code 1.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file exists but its contents do not match the expected format
    /// (bad magic, unsupported version, truncated payload).
    #[error("format error: {0}")]
    Format(String),

    /// Numerical failure at runtime (non-finite loss or model output).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
