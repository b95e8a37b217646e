use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A primitive received operands whose shapes cannot be combined.
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A NaN or infinity reached a place that requires finite values.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    /// Invalid argument or configuration.
    #[error("{0}")]
    Invalid(String),

    /// Malformed dataset content, keyed by 1-based line number.
    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    /// Checkpoint file problems (bad magic, version skew, truncation).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
