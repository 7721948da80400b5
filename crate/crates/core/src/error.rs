use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Log was asked for a rotation whose angle sits within the singular band at π.
    #[error("rotation angle {angle} is within 1e-6 of pi; use the fallback logarithm")]
    NearPiRotation { angle: f64 },

    #[error("matrix is not a proper rotation: {0}")]
    InvalidRotation(String),

    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue})")]
    CovarianceNotPsd { min_eigenvalue: f64 },

    #[error("bad parameter: {0}")]
    BadParameter(String),

    #[error("horizon mismatch: model expects T_p = {expected}, got {got}")]
    HorizonMismatch { expected: usize, got: usize },

    #[error("degenerate canonical frame: {0}")]
    DegenerateFrame(String),

    #[error("no target registered for this observation")]
    UnknownObservation,

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("group axiom violated: {0}")]
    AxiomViolation(String),

    #[error("kernel layout mismatch at transition {position}: expected {expected}, got {got}")]
    LayoutMismatch {
        position: usize,
        expected: String,
        got: String,
    },

    #[error("task mismatch: {0} vs {1}")]
    TaskMismatch(String, String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
