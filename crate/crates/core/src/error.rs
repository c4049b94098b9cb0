use thiserror::Error;

/// Errors produced by the core algorithms.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("size mismatch: {0}")]
    Size(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("empty region")]
    EmptyRegion,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn size_err(msg: impl Into<String>) -> Error {
    Error::Size(msg.into())
}
