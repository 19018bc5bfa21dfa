//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up for the requested operation.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    /// A retained-count α is outside `0..=limit` for its dimension.
    AlphaOutOfRange {
        context: &'static str,
        alpha: usize,
        limit: usize,
    },
    /// Compaction would drop a nonzero entry.
    NonzeroDiscard { row: usize, col: usize, value: f32 },
    /// An index list entry is out of bounds.
    IndexOutOfBounds {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    /// An index list is not strictly increasing.
    IndexOrder { context: &'static str },
    /// A value that must be finite is NaN or infinite (training divergence,
    /// corrupted input, numeric overflow).
    NonFinite { context: String },
    /// An internal invariant was violated; indicates a bug, not bad input.
    Invariant { context: String },
    /// Architecture manifest is malformed or internally inconsistent.
    Manifest { layer: Option<usize>, message: String },
    /// Model archive is malformed (version, truncation, length disagreement).
    Archive { message: String },
    /// Problem with a dataset or interchange file.
    Dataset { message: String },
    /// Bad configuration or command usage.
    Usage { message: String },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                actual,
            } => write!(f, "{context}: shape mismatch, expected {expected}, got {actual}"),
            Error::AlphaOutOfRange {
                context,
                alpha,
                limit,
            } => write!(f, "{context}: alpha {alpha} out of range 0..={limit}"),
            Error::NonzeroDiscard { row, col, value } => write!(
                f,
                "compaction would discard nonzero entry {value} at ({row}, {col})"
            ),
            Error::IndexOutOfBounds {
                context,
                index,
                bound,
            } => write!(f, "{context}: index {index} out of bounds (< {bound} required)"),
            Error::IndexOrder { context } => {
                write!(f, "{context}: index list must be strictly increasing")
            }
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::Invariant { context } => write!(f, "invariant violated: {context}"),
            Error::Manifest { layer, message } => match layer {
                Some(i) => write!(f, "manifest layer {i}: {message}"),
                None => write!(f, "manifest: {message}"),
            },
            Error::Archive { message } => write!(f, "archive: {message}"),
            Error::Dataset { message } => write!(f, "dataset: {message}"),
            Error::Usage { message } => write!(f, "usage: {message}"),
            Error::Io(e) => write!(f, "io: {e}"),
            Error::Json(e) => write!(f, "json: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl Error {
    pub fn usage(message: impl Into<String>) -> Self {
        Error::Usage {
            message: message.into(),
        }
    }

    pub fn archive(message: impl Into<String>) -> Self {
        Error::Archive {
            message: message.into(),
        }
    }

    pub fn dataset(message: impl Into<String>) -> Self {
        Error::Dataset {
            message: message.into(),
        }
    }

    /// True for errors that indicate operator error rather than a failed run.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage { .. })
    }
}
