use thiserror::Error;

/// Errors raised by the unmixing library.
#[derive(Debug, Error)]
pub enum UnmixError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate data at {step}: {detail}")]
    Degenerate { step: String, detail: String },
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UnmixError>;

pub(crate) fn dim_err(msg: impl Into<String>) -> UnmixError {
    UnmixError::Dimension(msg.into())
}
