//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OaisError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The target log-density returned a non-finite value. Domain errors are
    /// surfaced rather than mapped to -inf so that weight arithmetic stays
    /// auditable.
    #[error("target domain error at x = {x:?}: log-density evaluated to {value}")]
    TargetDomain { x: Vec<f64>, value: f64 },

    #[error("normalising constant required but not declared: {0}")]
    MissingLogZ(&'static str),

    /// Every importance weight underflowed to zero (or the set was empty).
    #[error("degenerate particle set: all importance weights are zero")]
    DegenerateWeights,

    /// The mean squared weight overflowed f64 even after max-subtraction,
    /// which indicates a catastrophically mismatched proposal.
    #[error("weight overflow: log mean squared weight {log_mean:.3} exceeds the f64 range")]
    WeightOverflow { log_mean: f64 },

    #[error(
        "particle reuse at mismatched parameter: particles drawn at {drawn_at:?}, gradient requested at {requested:?}"
    )]
    ReuseMismatch {
        drawn_at: Vec<f64>,
        requested: Vec<f64>,
    },

    #[error("unsupported schedule: {0}")]
    BadSchedule(&'static str),

    #[error("gradient oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("step size {gamma:.6e} exceeds 1/L = {inv_l:.6e}")]
    StepTooLarge { gamma: f64, inv_l: f64 },

    #[error("theta is within one finite-difference step of the box boundary")]
    TooCloseToBoundary,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("rate fit requires at least 3 points, got {0}")]
    TooFewPoints(usize),

    #[error("rate fit requires positive values: {0}")]
    NonPositiveFitData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed table: {0}")]
    MalformedTable(String),
}

pub type Result<T> = std::result::Result<T, OaisError>;
