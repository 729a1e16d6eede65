use thiserror::Error;

pub type Result<T> = std::result::Result<T, FitError>;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: String,
        index: usize,
        size: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stratum exhausted: {stratum} has {available} eligible items, {needed} needed")]
    StratumExhausted {
        stratum: String,
        available: usize,
        needed: usize,
    },

    #[error("checkpoint format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("checkpoint version mismatch: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },

    #[error("training diverged: non-finite loss in epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FitError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        FitError::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        FitError::Config(msg.into())
    }

    pub fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        FitError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
