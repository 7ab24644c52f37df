//! Crate-wide error type.

use num_complex::Complex64;

/// Errors produced by the measure, solver, edge, spike, rmt and harness
/// layers. Variants are grouped by failure class rather than by module so
/// that callers (in particular the CLI) can map them onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A mathematical precondition was violated (argument outside the
    /// domain of the operation).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration or construction input.
    #[error("config error: {0}")]
    Config(String),

    /// Fixed-point solver failed to reach the requested residual.
    #[error("subordination solver did not converge at z = {z}: residual {residual:.3e} after {iterations} iterations (tolerance {tolerance:.3e})")]
    SolverDiverged {
        z: Complex64,
        residual: f64,
        tolerance: f64,
        iterations: usize,
        last_omega_a: Complex64,
        last_omega_b: Complex64,
    },

    /// A rational-function evaluation hit (or came too close to) a pole.
    #[error("pole error: {0}")]
    Pole(String),

    /// A linear system or matrix factorization was singular.
    #[error("singularity error: {0}")]
    Singular(String),

    /// Bracketed search could not enclose a root or minimum.
    #[error("bracket error: {0}")]
    Bracket(String),

    /// The two independent edge-location routes disagree.
    #[error("edge inconsistency: parametric edge {parametric:.12} fails the Stieltjes-inversion cross-check ({detail})")]
    EdgeInconsistency { parametric: f64, detail: String },

    /// Dense linear algebra backend failure (LAPACK info != 0).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Experiment plan is not runnable as requested.
    #[error("plan error: {0}")]
    Plan(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
