use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: {msg}")]
    Precondition { op: &'static str, msg: String },

    #[error("backward called on a graph that was already consumed")]
    GraphConsumed,

    #[error("backward needs a 1x1x1x1 loss, got {0}")]
    NotScalar(Shape),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unsupported or malformed image ({msg})")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training halted at epoch {epoch}: loss became non-finite")]
    NumericalHalt {
        epoch: usize,
        last_good: Option<PathBuf>,
    },
}

impl Error {
    pub(crate) fn pre(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Precondition {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Checkpoint load/save failures. Each variant has a stable numeric code.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes (not an EraseNet checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed entry: {0}")]
    Malformed(String),
    #[error("unknown parameter name `{0}`")]
    UnknownParameter(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{name}` has dims {found:?}, model expects {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("variant mismatch: checkpoint is EraseNet-{found}, expected EraseNet-{expected}")]
    VariantMismatch { expected: u8, found: u8 },
}

impl CheckpointError {
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadMagic => 1,
            CheckpointError::UnsupportedVersion(_) => 2,
            CheckpointError::Truncated => 3,
            CheckpointError::Checksum { .. } => 4,
            CheckpointError::Malformed(_) => 5,
            CheckpointError::UnknownParameter(_) => 6,
            CheckpointError::MissingParameter(_) => 7,
            CheckpointError::ParameterShape { .. } => 8,
            CheckpointError::VariantMismatch { .. } => 9,
        }
    }
}
