use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The weighted cross-covariance has two vanishing singular values, so the
    /// optimal rotation is not unique (e.g. collinear means).
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    /// Every component is infinitely far from some point even in log space.
    #[error("degenerate mixture: {0}")]
    DegenerateGmm(String),

    #[error("not enough points: have {have}, need at least {need}")]
    InsufficientPoints { have: usize, need: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
