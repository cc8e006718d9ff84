use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("spatial size {height}x{width} is not divisible by {divisor}")]
    Divisibility {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("invalid gate: {0}")]
    Gate(String),

    #[error("all paired differences are zero; signed-rank test is undefined")]
    DegenerateTest,

    #[error("non-finite loss at epoch {epoch}, iteration {iter} (dump: {dump:?})")]
    NonFiniteLoss {
        epoch: usize,
        iter: usize,
        dump: Option<PathBuf>,
    },

    #[error("config hash mismatch: artifact has {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("malformed file {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("failed to read {} input file(s):\n{}", .0.len(), .0.join("\n"))]
    Inputs(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
