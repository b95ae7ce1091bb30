use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: field `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },

    #[error("invalid dataset: {}", .violations.join("; "))]
    InvalidDataset { violations: Vec<String> },

    #[error("tau threshold undefined: largest class holds all {n} samples")]
    UndefinedThreshold { n: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("matrix is not symmetric: max asymmetry {asymmetry:e}")]
    Asymmetric { asymmetry: f64 },

    #[error("non-finite entries in matrix")]
    NonFinite,

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("dykstra projection did not converge in {rounds} rounds (residual {residual:e})")]
    DykstraNonConvergence { rounds: usize, residual: f64 },

    #[error("rank overflow: eigenvalue {index} is {value:e}, exceeds tolerance for d = {d}")]
    RankOverflow { d: usize, index: usize, value: f64 },

    #[error("instance too large for grid oracle: k = {k} (max 3)")]
    InstanceTooLarge { k: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("csv parse error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn spec(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidSpec {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
