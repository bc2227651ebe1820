use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid ranking: {0}")]
    InvalidRanking(String),

    #[error("propensity of item {item} must be positive, got {value}")]
    NonPositivePropensity { item: usize, value: f64 },

    #[error("estimate undefined: {0}")]
    UndefinedEstimate(String),

    #[error("insufficient eligible source queries: requested {requested}, only {available} eligible")]
    InsufficientQueries { requested: usize, available: usize },

    #[error("non-finite gradient at step {step}: {snapshot}")]
    NonFiniteGradient { step: usize, snapshot: String },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("unknown query id {0:?} in click log")]
    UnknownQuery(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
