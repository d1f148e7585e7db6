use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("malformed dataset tree at {path}: {reason}")]
    MalformedTree { path: PathBuf, reason: String },

    #[error("missing ground-truth mask for anomalous image {image} (expected {expected})")]
    MissingMask { image: PathBuf, expected: PathBuf },

    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("pretrained weights unavailable: expected {0}")]
    MissingWeights(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("pairing mismatch: recovery target {target} does not match source {source_id}")]
    Pairing { target: String, source_id: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => 2,
            Error::MalformedTree { .. }
            | Error::MissingMask { .. }
            | Error::Decode { .. }
            | Error::Io { .. }
            | Error::MissingWeights(_)
            | Error::Pairing { .. }
            | Error::Json(_) => 3,
            Error::Numeric(_) | Error::UndefinedMetric(_) | Error::Shape(_) | Error::Tensor(_) => 4,
        }
    }
}
