use thiserror::Error;

/// Errors raised by the numeric kernels, layers, optimizers and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("state error: {0}")]
    StateError(String),
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericFailure(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::StateError(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
