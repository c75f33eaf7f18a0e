use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape for {op}: {dims:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        dims: Vec<usize>,
        reason: String,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("odd spatial dimension {dims:?}: haar transform needs even height and width")]
    OddDimension { dims: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from every parameter on the tape")]
    DetachedGraph,

    #[error("{reason} at offset {offset}")]
    Format { reason: String, offset: u64 },

    #[error("identity {0} is not present in the store")]
    MissingIdentity(usize),

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(reason: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            reason: reason.into(),
            offset,
        }
    }
}
