use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("batchnorm state is uninitialized: {0}")]
    Uninitialized(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("part mask is empty, no centroid for {0}")]
    EmptyMask(String),

    #[error("singular theta: zero scale in part {0}")]
    SingularTheta(usize),

    #[error("synthetic spec rejected: {0}")]
    Synth(String),

    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("parameter name mismatch: expected {expected}, found {found}")]
    NameMismatch { expected: String, found: String },

    #[error("shape mismatch for parameter {name}: model {model:?}, checkpoint {checkpoint:?}")]
    ParamShape {
        name: String,
        model: Vec<usize>,
        checkpoint: Vec<usize>,
    },

    #[error("checkpoint has no entry for {0}")]
    MissingEntry(String),

    #[error("dataset error for {id}: {detail}")]
    Data { id: String, detail: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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
