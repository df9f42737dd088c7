use thiserror::Error;
use xvwm_core::XvwmError;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Core(#[from] XvwmError),
    #[error("frame encoding: {0}")]
    Encoding(String),
    #[error("model worker stopped")]
    WorkerGone,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ServeError>;
