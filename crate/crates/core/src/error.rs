use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {0} has no training images")]
    EmptyClass(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image {path}: {reason} (byte offset {offset})")]
    MalformedImage {
        path: PathBuf,
        reason: String,
        offset: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 2 usage, 3 data, 4 numeric divergence, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidArgument(_) => 2,
            Error::Io { .. }
            | Error::MalformedImage { .. }
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Json(_)
            | Error::LabelOutOfRange { .. }
            | Error::EmptyClass(_)
            | Error::ShapeMismatch { .. } => 3,
            Error::Divergence { .. } | Error::NonFinite(_) => 4,
            Error::NonScalarLoss(_) | Error::Verification(_) => 1,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
