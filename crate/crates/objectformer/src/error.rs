use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failure of a command, mapped onto a process exit code by [`RunError::exit_code`].
#[derive(Debug, Error)]
pub enum RunError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Model(#[from] objectformer_core::Error),
}

pub type RunResult<T> = std::result::Result<T, RunError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => EXIT_USAGE,
            RunError::Io { .. } | RunError::Format { .. } => EXIT_IO,
            RunError::Verification(_) | RunError::Model(_) => EXIT_VERIFICATION,
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        RunError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl ToString) -> Self {
        RunError::Format { path: path.as_ref().to_path_buf(), message: message.to_string() }
    }
}
