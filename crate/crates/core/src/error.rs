use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("{skipped} of {total} rows were malformed (more than 10%)")]
    TooManyMalformed { skipped: usize, total: usize },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("vocabulary too small: {eligible} eligible items, {requested} requested")]
    VocabTooSmall { eligible: usize, requested: usize },

    #[error("non-finite loss {loss} at epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("model artifact: {0}")]
    Artifact(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
