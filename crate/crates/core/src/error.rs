use thiserror::Error;

/// Errors raised by the solver and its supporting modules.
#[derive(Debug, Error)]
pub enum MfgError {
    #[error("empty sample list")]
    EmptyMeasure,

    #[error("non-finite value {value} at index {index}")]
    NonFiniteValue { index: usize, value: f64 },

    #[error("invalid weight {weight} at index {index}")]
    InvalidWeight { index: usize, weight: f64 },

    #[error("weights sum to {sum}, expected 1")]
    WeightsNotNormalized { sum: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("unknown assumption tag `{0}` (expected one of A1, A2, A3, A4, LasryLions)")]
    UnknownAssumption(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite state encountered at step {step}")]
    NonFiniteState { step: usize },

    #[error("normal equations are rank deficient at node {node} (pivot {pivot:e}); use ridge > 0")]
    RankDeficient { node: usize, pivot: f64 },

    #[error("non-finite regression fit at node {node}")]
    NonFiniteFit { node: usize },

    #[error("inner solver did not converge on interval [{start}, {end}] (residual {residual:e})")]
    InnerNotConverged { start: f64, end: f64, residual: f64 },

    #[error(
        "interval length underflow at interface t = {interface}: cannot split below one step \
         (decoupling Lipschitz estimates so far: L_x = {l_x:.4}, L_m = {l_m:.4})"
    )]
    IntervalUnderflow { interface: f64, l_x: f64, l_m: f64 },

    #[error("assumption gate failed: {0}")]
    AssumptionGate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MfgError>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> MfgError {
    MfgError::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
