//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform to a primitive's rule.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// An optimizer step found a parameter without a gradient.
    #[error("optimizer step: parameter `{name}` has no gradient")]
    MissingGrad { name: String },

    /// A configuration value violates a precondition.
    #[error("invalid config: {0}")]
    Config(String),

    /// A training run produced a non-finite loss; carries a diagnostic snapshot.
    #[error("non-finite loss, run aborted: {0}")]
    NonFiniteLoss(String),

    /// A file could not be parsed. Offset is in bytes for binary formats,
    /// line numbers for text formats.
    #[error("parse error in {path} at {location}: {detail}")]
    Parse {
        path: String,
        location: String,
        detail: String,
    },

    /// Unknown operation name.
    #[error("unknown operation `{0}`")]
    UnknownOp(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
