//! Error type shared across the toolkit.

use thiserror::Error;

/// Unified error for tensor, network, pruning, data, and report operations.
#[derive(Error, Debug)]
pub enum LapError {
    /// Tensor or layer shapes do not compose.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violated an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A config combination is contradictory.
    #[error("inconsistent config: {0}")]
    Config(String),

    /// Architecture or layer arrangement the operation does not support.
    #[error("unsupported architecture: {0}")]
    Unsupported(String),

    /// A data-dependent criterion was invoked without its statistics.
    #[error("missing statistics: {0}; estimate them on the trained network first")]
    MissingStats(String),

    /// A computation produced non-finite values (diverged training, overflow).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// IDX file carries an unexpected magic number.
    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    /// File ended before the declared payload.
    #[error("truncated file {path}: need {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },

    /// Image and label files disagree on the example count.
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// Generic data problem (empty dataset, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Model container is malformed.
    #[error("model format error: {0}")]
    Format(String),

    /// An oracle or verification suite found a violation.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Process exit classes used by the CLI: 0 success, 1 usage, 2 data, 3 verification.
impl LapError {
    pub fn exit_code(&self) -> u8 {
        match self {
            LapError::Shape(_)
            | LapError::InvalidArgument(_)
            | LapError::Config(_)
            | LapError::Unsupported(_)
            | LapError::MissingStats(_)
            | LapError::Numeric(_) => 1,
            LapError::BadMagic { .. }
            | LapError::Truncated { .. }
            | LapError::CountMismatch { .. }
            | LapError::Data(_)
            | LapError::Format(_)
            | LapError::Io(_) => 2,
            LapError::Verification(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, LapError>;
