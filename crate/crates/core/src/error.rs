//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Operation-specific precondition violation.
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    /// Autodiff tape misuse (non-scalar loss, consumed tape, untracked loss).
    #[error("tape: {0}")]
    Tape(String),

    /// Checkpoint container problems (bad magic, truncation, shape mismatch).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Dataset / manifest problems.
    #[error("data: {0}")]
    Data(String),

    /// Training aborted (e.g. NaN loss or NaN gradient).
    #[error("training: {0}")]
    Training(String),

    /// Configuration file or flag validation failure.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(String),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
