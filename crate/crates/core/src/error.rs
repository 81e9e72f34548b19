use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("{what}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("method {method} cannot be used with {detail}")]
    MethodMismatch { method: String, detail: String },

    #[error("idx {path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("idx {path}: truncated, need {needed} bytes but file has {actual}")]
    IdxTruncated {
        path: PathBuf,
        needed: usize,
        actual: usize,
    },

    #[error("idx: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::EmptyInput(_) => "empty_input",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::MethodMismatch { .. } => "method_mismatch",
            Error::IdxMagic { .. } => "idx_magic",
            Error::IdxTruncated { .. } => "idx_truncated",
            Error::IdxCountMismatch { .. } => "idx_count_mismatch",
            Error::ModelFormat(_) => "model_format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
