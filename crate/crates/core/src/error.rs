use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),

    #[error("invalid sample count {m} for a cloud of {n} points")]
    InvalidCount { m: usize, n: usize },

    #[error("invalid k={k} for a reference set of {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("projection mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("manifest error: {0}")]
    ManifestError(String),

    #[error("shape error in tensor `{tensor}`: {detail}")]
    ShapeError { tensor: String, detail: String },

    #[error("checksum error in tensor `{tensor}`: {detail}")]
    ChecksumError { tensor: String, detail: String },

    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("frozen tensors changed during training: {0}")]
    FrozenViolation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
