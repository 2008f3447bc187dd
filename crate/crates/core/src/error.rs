use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of range: {0}")]
    Range(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("exhaustive limit exceeded: {items} items > limit {limit}")]
    Capacity { items: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error in {}{}: {message}", file.display(), offset.map(|o| format!(" at offset {o}")).unwrap_or_default())]
    Format {
        file: PathBuf,
        offset: Option<u64>,
        message: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(file: impl Into<PathBuf>, offset: Option<u64>, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
