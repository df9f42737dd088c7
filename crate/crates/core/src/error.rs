use thiserror::Error;
use xvwm_tensor::TensorError;

#[derive(Debug, Error)]
pub enum XvwmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error in field `{field}`: {msg}")]
    Format { field: &'static str, msg: String },
    #[error("range error: {0}")]
    Range(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("startup error: {0}")]
    Startup(String),
    #[error("non-finite loss at step {step}; batch: {batch}")]
    NonFiniteLoss { step: u64, batch: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl XvwmError {
    /// Short machine-parsable class name.
    pub fn class(&self) -> &'static str {
        match self {
            XvwmError::Config(_) => "config",
            XvwmError::Format { .. } => "format",
            XvwmError::Range(_) => "range",
            XvwmError::Domain(_) => "domain",
            XvwmError::Usage(_) | XvwmError::Tensor(_) => "usage",
            XvwmError::Startup(_) => "startup",
            XvwmError::NonFiniteLoss { .. } => "numeric",
            XvwmError::Io(_) => "io",
        }
    }

    pub(crate) fn format(field: &'static str, msg: impl Into<String>) -> Self {
        XvwmError::Format {
            field,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, XvwmError>;
