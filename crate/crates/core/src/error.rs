//! Error types shared across the calibration library.

use thiserror::Error;

/// Errors raised by the geometry, model, solver, and estimation layers.
#[derive(Debug, Error)]
pub enum CalibError {
    /// An array and a source (or two points that must stay apart) coincide,
    /// so a propagation direction is undefined.
    #[error("degenerate geometry: points coincide (separation {separation:.3e} m)")]
    DegenerateGeometry { separation: f64 },

    /// A matrix or vector does not have the size implied by (N, K).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A matrix fails the rotation-matrix invariants (orthonormality, det +1).
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),

    /// The weighted normal matrix is numerically rank deficient.
    #[error("normal matrix is numerically singular (condition estimate {condition:.3e})")]
    SingularProblem { condition: f64 },

    /// A residual or Jacobian evaluation produced NaN or infinity.
    #[error("residual evaluation produced non-finite values")]
    NonFiniteResidual,

    /// Fewer sound events than an algorithm's floor.
    #[error("needs at least {min} sound events, got {got}")]
    InsufficientEvents { got: usize, min: usize },

    /// Fewer correspondence points than point-set registration needs.
    #[error("point-set registration needs at least {min} points, got {got}")]
    InsufficientPoints { got: usize, min: usize },

    /// Point sets whose cross-covariance is rank deficient (coincident or
    /// collinear points); the aligning rotation is not unique.
    #[error("point sets are degenerate (coincident or collinear)")]
    DegeneratePointSet,

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Pipeline-level wrapper distinguishing which stage failed.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("initial value estimation failed: {0}")]
    Ive(#[source] CalibError),

    #[error("joint optimization failed: {0}")]
    Joint(#[source] CalibError),
}
