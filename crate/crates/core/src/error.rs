use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("term `{term}` produced a non-finite value at row {row}")]
    NonFiniteTerm { term: String, row: usize },

    #[error("cannot parse term `{input}`: {reason}")]
    TermSyntax { input: String, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("logistic fit did not converge after {iterations} iterations (max |score| = {max_abs_score:e}); the data may be separated")]
    NonConvergence { iterations: usize, max_abs_score: f64 },

    #[error("singular or ill-conditioned matrix ({0})")]
    Singular(String),

    #[error("propensity score {0} outside (0, 1)")]
    ScoreOutOfRange(f64),

    #[error("weight total is zero in the {arm} arm")]
    EmptyArm { arm: &'static str },

    #[error("covariate has zero pooled standard deviation but unequal group means")]
    ZeroPooledSd,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("true value is zero; relative bias is undefined")]
    ZeroTrueValue,

    #[error("{failed} of {replicates} replicates failed (limit 5%)")]
    ExcessiveFailures { failed: usize, replicates: usize },

    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
