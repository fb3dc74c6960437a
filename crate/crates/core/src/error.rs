use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("time index {index} out of range (max {max})")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value produced in {context} at time index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("Picard iteration did not converge after {iterations} iterations (last residual {residual:e}); refine the grid")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("backtracking line search reached its floor (step {step:e}) without sufficient decrease")]
    NoDescent { step: f64 },

    #[error("unknown coefficient family `{0}`")]
    UnknownFamily(String),

    #[error("malformed parameter `{key}`: {reason}")]
    MalformedParams { key: String, reason: String },

    #[error("control set is empty or inconsistent: {0}")]
    InvalidControlSet(String),

    #[error("control value outside the control set at time index {index}")]
    ControlOutsideSet { index: usize },

    #[error("problem kind mismatch: {0}")]
    KindMismatch(String),

    #[error("finite-difference step must be positive, got {0}")]
    NonPositiveStep(f64),
}
