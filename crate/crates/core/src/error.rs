use std::path::PathBuf;

use crate::diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: u64, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
