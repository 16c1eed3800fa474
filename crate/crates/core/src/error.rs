use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vector norm {norm:e} is below the normalization floor")]
    DegenerateVector { norm: f64 },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("mixture fit needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("points have standard deviation {0:e}, too small to fit a mixture")]
    DegenerateSpread(f64),
    #[error("embedding has norm {0}, expected a unit vector")]
    NotNormalized(f64),
    #[error("no prototype recorded for class {0}")]
    PrototypeMissing(usize),
    #[error("contrastive loss needs at least one positive")]
    EmptyPositives,
    #[error("temporal head {index} requested, model has {count}")]
    ScaleOutOfRange { index: usize, count: usize },
    #[error("video has {len} frames, need {needed} for stride {stride}")]
    VideoTooShort { len: usize, needed: usize, stride: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint rejected: {0}")]
    CheckpointMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
