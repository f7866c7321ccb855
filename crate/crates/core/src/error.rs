use std::path::PathBuf;

use murmur_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest line {line}: {msg}")]
    Manifest { line: u64, msg: String },

    #[error("manifest: {0}")]
    ManifestContent(String),

    #[error("audio {path}: {msg}")]
    Audio { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("feature cache {path}: {msg}")]
    FeatureCache { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged: {0}")]
    NonFiniteLoss(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attaches the file path to csv failures that came from the filesystem.
pub(crate) fn csv_at(path: &std::path::Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Csv(e),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
