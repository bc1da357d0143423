use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid network description, shapes or parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or out-of-range data (annotations, manifests, images).
    #[error("data error: {0}")]
    Data(String),

    /// Weights file could not be decoded.
    #[error("weights format error: {0}")]
    Format(String),

    /// Source weights are incompatible with the surgery target.
    #[error("surgery error: {0}")]
    Surgery(String),

    /// Training diverged and exhausted its recovery budget.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
