use std::fmt::Display;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch { op: String, expected: String, found: String },
    #[error("entry ({row}, {col}) = {value} is not strictly positive")]
    NonPositiveEntry { row: usize, col: usize, value: f64 },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("sinkhorn did not converge after {iterations} iterations (marginal violation {violation:e})")]
    NonConvergence { iterations: usize, violation: f64 },
    #[error("particles diverged at step {step} (|x| = {magnitude:e})")]
    Divergence { step: usize, magnitude: f64 },
    #[error("matrix is ill-conditioned (condition number {condition:e})")]
    IllConditioned { condition: f64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("no binding for `{0}`")]
    Unbound(String),
    #[error("backward called before forward")]
    NotEvaluated,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(op: &str, expected: impl Display, found: impl Display) -> Self {
        Error::DimensionMismatch {
            op: op.to_owned(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
