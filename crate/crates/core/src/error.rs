use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("numerical overflow in {what} at step {step}")]
    Overflow { what: String, step: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("sequence too long: {len} patches exceeds positional capacity {capacity}")]
    SequenceTooLong { len: usize, capacity: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
