//! Error taxonomy shared by every module in the crate.
//!
//! Numerical failures carry enough context (iteration counts, residuals,
//! condition estimates) for a caller to decide between retrying with a finer
//! grid and reporting the query point as failed.

use thiserror::Error;

/// All failure modes surfaced by the solver library.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A utility function was evaluated outside its wealth domain, or
    /// constructed with invalid parameters.
    #[error("utility domain violation: {0}")]
    Domain(String),

    /// A covariance matrix failed its Cholesky factorization.
    #[error("covariance matrix not positive definite at {context}")]
    NotPositiveDefinite { context: String },

    /// A state left the open box on which the model is defined.
    #[error("state left the model domain: coordinate {coordinate} = {value:e} outside ({lo:e}, {hi:e})")]
    OutOfDomain {
        coordinate: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// An implicit integrator stage failed to converge.
    #[error("inner Newton solve diverged at step {step}: residual {residual:e} after {iterations} iterations")]
    InnerNewtonDivergence {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    /// The variational gain matrix is numerically singular and cannot
    /// precondition the outer Newton iteration.
    #[error("variational gain matrix is numerically singular (condition estimate {cond:e})")]
    SingularGain { cond: f64 },

    /// The outer Newton iteration for the flow-map inversion ran out of
    /// iterations before meeting its tolerance.
    #[error("flow-map inversion exceeded {iterations} iterations: residual {residual:e}")]
    MaxIterationsExceeded { iterations: usize, residual: f64 },

    /// A finite-difference bump collapsed to zero width, so no derivative
    /// estimate can be formed.
    #[error("finite-difference bump degenerated at coordinate {coordinate}")]
    DegenerateBump { coordinate: usize },

    /// The mean-reversion oracle's linear system matrix is singular, so the
    /// affine-offset form of its solution does not exist.
    #[error("oracle system matrix is singular; use the augmented-system path")]
    SingularA,

    /// Every simulated path left the model or wealth domain.
    #[error("all {paths} simulated paths left the admissible domain")]
    AllPathsInvalid { paths: usize },

    /// A run configuration failed validation before any computation started.
    #[error("configuration error: {0}")]
    Config(String),

    /// An output file could not be written.
    #[error("i/o error: {0}")]
    Io(String),
}
