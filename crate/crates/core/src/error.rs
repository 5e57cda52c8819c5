use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input too short: {frames} frames, need at least {required}")]
    InputTooShort { frames: usize, required: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error was caused by bad input data rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_) | Error::Contract(_))
    }
}
