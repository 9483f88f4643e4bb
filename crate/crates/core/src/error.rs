use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label value {value} at voxel {index} is outside 0..=3")]
    LabelOutOfRange { value: u8, index: usize },

    #[error("non-finite {what} at step {step}: {value}")]
    NumericFailure {
        what: &'static str,
        step: u64,
        value: f64,
    },

    #[error("gradient check: non-finite loss while perturbing parameter {param} element {element}")]
    GradCheckNonFinite { param: usize, element: usize },

    #[error(transparent)]
    Checkpoint(#[from] crate::train::CheckpointError),

    #[error(transparent)]
    Svol(#[from] crate::data::SvolError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
