use thiserror::Error;

#[derive(Debug, Error)]
pub enum IcesError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("infinite KL: {0}")]
    InfiniteKl(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("empty metrics: {0}")]
    EmptyMetrics(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IcesError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        IcesError::Config { key: key.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, IcesError>;
