use thiserror::Error;

#[derive(Debug, Error)]
pub enum BpfaError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate variational state: {0}")]
    Degenerate(String),
    #[error("degenerate column {column}: {reason}")]
    DegenerateColumn { column: usize, reason: String },
    #[error("impossible split: {0}")]
    ImpossibleSplit(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BpfaError>;
