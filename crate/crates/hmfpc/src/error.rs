//! Error types shared across the crate.

use thiserror::Error;

/// Convergence diagnostics attached to a fit, whether or not it succeeded.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceDiag {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub restarts: usize,
    pub message: String,
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("subject {subject} has no observations")]
    EmptySubject { subject: usize },

    #[error("time {t} outside basis domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("objective is not finite at subject {subject}")]
    NonFiniteObjective { subject: usize },

    #[error("gradient undefined: component {component} has near-zero norm")]
    NonDifferentiable { component: usize },

    #[error("optimization did not converge after {restarts} restarts: {message}")]
    Convergence {
        message: String,
        restarts: usize,
        /// Best parameter vector found, flattened in optimizer order.
        best: Vec<f64>,
        grad_norm: f64,
    },

    #[error("Hessian not negative-definite after jitter escalation")]
    IndefiniteHessian,

    #[error("tuning failed: {0}")]
    TuningFailure(String),

    #[error("degenerate covariance: need at least 2 subjects, got {0}")]
    DegenerateCovariance(usize),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("unknown subject index {0}")]
    UnknownSubject(usize),

    #[error("model/data mismatch: {0}")]
    Integrity(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
