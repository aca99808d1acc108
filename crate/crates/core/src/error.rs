use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("aggregation precondition violated: {0}")]
    AggregationPrecondition(String),

    #[error("unsupported attack for this operation: {0}")]
    UnsupportedAttack(String),

    #[error("IDX parse error in {path}: {kind}")]
    IdxParse { path: PathBuf, kind: IdxErrorKind },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distinguishes the ways an IDX file can be malformed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxErrorKind {
    BadMagic { expected: u32, found: u32 },
    Truncated { expected_bytes: usize, found_bytes: usize },
    BadShape(String),
}

impl std::fmt::Display for IdxErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IdxErrorKind::BadMagic { expected, found } => {
                write!(f, "bad magic {found:#010x} (expected {expected:#010x})")
            }
            IdxErrorKind::Truncated {
                expected_bytes,
                found_bytes,
            } => write!(f, "truncated: need {expected_bytes} bytes, found {found_bytes}"),
            IdxErrorKind::BadShape(s) => write!(f, "bad shape: {s}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
