use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the keypoint pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value at flat index {index} ({context})")]
    NonFinite { index: usize, context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension {dim} is not divisible by {divisor} ({context})")]
    Indivisible {
        dim: usize,
        divisor: usize,
        context: &'static str,
    },

    #[error("training diverged at iteration {iteration}: loss {loss} (trace tail: {trace:?})")]
    Diverged {
        iteration: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
