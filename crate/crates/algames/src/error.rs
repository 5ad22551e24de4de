use thiserror::Error;

/// Errors produced by problem construction, solving, and analysis.
#[derive(Debug, Error)]
pub enum GameError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid argument {arg}: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },
    #[error("KKT system is singular even after regularization up to {max_reg}")]
    SingularKkt { max_reg: f64 },
    #[error("line search stalled: step length fell below {alpha_min}")]
    LineSearchStall { alpha_min: f64 },
    #[error("initial-state sampling exhausted {attempts} attempts without a feasible draw")]
    SamplingExhausted { attempts: usize },
    #[error("operation requires a converged solution, got status {status}")]
    NotConverged { status: &'static str },
    #[error("re-solve after perturbation failed: {reason}")]
    ProjectionFailed { reason: String },
}
