use std::path::PathBuf;

/// Every failure the engine can surface.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("crop window offset {offset:?} size {size:?} exceeds tensor shape {shape:?}")]
    CropOutOfBounds {
        shape: Vec<usize>,
        offset: Vec<usize>,
        size: Vec<usize>,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid reduction axes {0:?}")]
    InvalidAxes(Vec<usize>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("batch-norm needs at least two elements per channel in train mode")]
    DegenerateBatch,
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("target is not a one-hot vector")]
    InvalidTarget,
    #[error("backward pass requested after an inference-mode forward pass")]
    InvalidMode,
    #[error("duplicate subject id {0:?}")]
    DuplicateSubject(String),
    #[error("invalid label {0:?}")]
    InvalidLabel(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("insufficient subjects: {0}")]
    InsufficientSubjects(String),
    #[error("sample count must be at least 1")]
    InvalidSampleCount,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
