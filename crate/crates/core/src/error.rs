use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the ranking engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate observation for user {user:?}, item {item:?}")]
    DuplicateObservation {
        line: usize,
        user: String,
        item: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no user survives the split filter (min ratings per user = {min_ratings})")]
    EmptySplit { min_ratings: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("training diverged at epoch {epoch} (step size {step_size:e}, loss {loss})")]
    Divergence {
        epoch: usize,
        step_size: f64,
        loss: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
