use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("diagonal entry {index} has modulus {modulus:e}, at or below threshold {eps:e}")]
    DegenerateDiagonal { index: usize, modulus: f64, eps: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is numerically singular ({0})")]
    SingularMatrix(String),

    #[error("gram matrix is numerically singular (condition estimate {condition:e})")]
    SingularGram { condition: f64 },

    #[error("pilot column {column} of user {user} has power {power} > {limit}")]
    PilotPowerViolation { user: usize, column: usize, power: f64, limit: f64 },

    #[error("precoder has zero norm")]
    ZeroPrecoder,

    #[error("reference matrix has zero norm")]
    ZeroReference,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
