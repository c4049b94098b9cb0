use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the command-line front end. Each maps to a process
/// exit code through [`CliError::exit_code`].
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tulabm_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checkpoint was written for a different configuration (digest {found}, expected {expected})")]
    DigestMismatch { expected: String, found: String },

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(tulabm_core::Error::NonFinite { .. }) => 3,
            CliError::Core(tulabm_core::Error::Config(_)) | CliError::Core(tulabm_core::Error::Usage(_)) => 2,
            CliError::Usage(_) => 2,
            CliError::DigestMismatch { .. } => 4,
            CliError::CountMismatch(_) => 5,
            _ => 1,
        }
    }
}
