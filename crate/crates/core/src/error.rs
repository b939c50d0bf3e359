use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConnaError {
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("{kind} id {id} outside vocabulary of size {size}")]
    Vocabulary {
        kind: &'static str,
        id: usize,
        size: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConnaError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = ConnaError> = std::result::Result<T, E>;
