use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parameter layout mismatch")]
    LayoutMismatch,

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid target distribution: {0}")]
    InvalidTarget(String),

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("empty sample pool")]
    EmptyPool,

    #[error("no client updates to aggregate")]
    EmptyUpdates,

    #[error("cannot select {requested} clients out of {available}")]
    TooManyClients { requested: usize, available: usize },

    #[error("unknown pseudo-labeling mode `{0}`")]
    UnknownMode(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed shard record at line {line}: {message}")]
    ShardFormat { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
