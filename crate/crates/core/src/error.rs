use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// `location` is `line N` for a config file or `command line`.
    #[error("config {location}, key `{key}`: {msg}")]
    Config { location: String, key: String, msg: String },
    #[error("empty evaluation")]
    EmptyEvaluation,
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {msg}")]
    Format { what: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, msg: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            msg: msg.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
