use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("oracle protocol violation: {0}")]
    Protocol(String),

    #[error("requested tolerance {requested:e} is below the oracle floor {floor:e}")]
    ToleranceUnsatisfiable { requested: f64, floor: f64 },

    /// The value vector is zero, so every input maps to 0 and the score
    /// matrix cannot be identified.
    #[error("model is not identifiable: value vector is zero")]
    NonIdentifiable,

    #[error("probe construction failed: {0}")]
    ProbeConstruction(String),

    #[error("probe rejected: |u . v| = {overlap:e} is below the zero threshold")]
    ProbeRejected { overlap: f64 },

    #[error("oracle response inconsistent with an attention model (attention weight {alpha})")]
    OracleInconsistency { alpha: f64 },

    #[error("probe matrix is ill-conditioned (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("FFN learner failed: {0}")]
    LearnerFailure(String),

    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),

    #[error("infeasible constraints: {0}")]
    ConstraintInfeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;
