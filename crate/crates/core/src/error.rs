use thiserror::Error;

/// Errors raised across the PHM compression library.
#[derive(Debug, Error)]
pub enum PhmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("basis error: {0}")]
    Basis(String),

    #[error("empty batch: no supervised tokens")]
    EmptyBatch,

    #[error("infeasible budget: {0}")]
    Infeasible(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PhmError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PhmError::Dimension(msg.into()))
}
