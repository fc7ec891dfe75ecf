use thiserror::Error;

/// Error type shared by every module of the library.
#[derive(Debug, Error)]
pub enum DawnError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("inference error: {0}")]
    Inference(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DawnError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> DawnError {
    DawnError::InvalidShape(msg.into())
}
