use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("missing prerequisite: {0}")]
    Dependency(String),

    #[error("config hash mismatch for {what}: expected {expected}, found {found}")]
    ConfigHashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("unsupported format version {found} in {path:?} (expected {expected})")]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("corrupt payload in {path:?}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unknown instruction token {0:?}")]
    UnknownToken(String),

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
