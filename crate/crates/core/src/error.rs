use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("keyframe {orphan} has no counterpart in the frame directory")]
    Pairing { orphan: PathBuf },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend `{name}` unavailable: {reason}")]
    BackendUnavailable { name: String, reason: String },
    #[error("backend `{name}` failed: {reason}")]
    Backend { name: String, reason: String },
    #[error("non-finite {what} at step {step} (unlabeled frame {frame:?}, keyframe {keyframe})")]
    NonFinite {
        what: String,
        step: u64,
        frame: Option<usize>,
        keyframe: usize,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("malformed stream: {0}")]
    Stream(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
