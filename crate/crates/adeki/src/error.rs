use thiserror::Error;

/// Errors shared across the solver, inference, and orchestration layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Explicit time stepping produced a field value beyond the blow-up bound.
    #[error("solver instability: |u| reached {max:.3e} (bound {bound:.3e}) at t = {t:.6}")]
    Instability { max: f64, bound: f64, t: f64 },

    /// A snapshot was requested at a time the schedule does not contain.
    #[error("no stored snapshot at t = {t:.6}")]
    MissingSnapshot { t: f64 },

    /// Interpolation or measurement outside the simulation domain.
    #[error("point ({x:.4}, {y:.4}) is outside the domain")]
    OutOfDomain { x: f64, y: f64 },

    /// A matrix expected to be symmetric positive definite was not.
    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: &'static str },

    /// Ensemble covariance normalization needs at least two members.
    #[error("ensemble needs at least 2 members, got {got}")]
    EnsembleTooSmall { got: usize },

    /// Posterior update left zero probability mass everywhere.
    #[error("degenerate posterior update: likelihood * prior vanished at every node")]
    DegenerateUpdate,

    /// Relative error against an identically zero reference field.
    #[error("relative error is undefined: the reference field is identically zero")]
    UndefinedReference,

    /// Replaying an iteration from its checkpoint did not reproduce the stored state.
    #[error("checkpoint replay mismatch at iteration {iteration}, member {member}")]
    CheckpointMismatch { iteration: usize, member: usize },

    /// Gradient training failed to produce finite parameters.
    #[error("training diverged: {0}")]
    TrainingFailure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
