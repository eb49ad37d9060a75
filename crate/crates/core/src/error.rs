use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("no transition from state {from} to state {to}")]
    UnknownTransition { from: usize, to: usize },

    #[error(
        "reward {reward} on transition ({from}, {to}) overflows exp(); \
         rewards are expected to be non-positive costs (use negative weights)"
    )]
    RewardOverflow { from: usize, to: usize, reward: f64 },

    #[error(
        "I-M singular at elimination step {step}; the invertibility conditions \
         (acyclic support, or every row sum of M below 1) are likely violated"
    )]
    Singular { step: usize },

    #[error("linear solve residual {residual:e} exceeds tolerance {tolerance:e}")]
    Residual { residual: f64, tolerance: f64 },

    #[error("solution rejected: {0}")]
    InvalidSolution(String),

    #[error("state {state} is unreachable to the destination (z = {z:e})")]
    Unreachable { state: usize, z: f64 },

    #[error("value iteration stopped after {iterations} iterations without converging (last change {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("iteration bound inapplicable for tau = {tau}, eps = {eps} (need 0 < tau < 1, 0 < eps < 1)")]
    BoundInapplicable { tau: f64, eps: f64 },

    #[error("policy at state {state} sums to {sum} instead of 1")]
    UnnormalizedPolicy { state: usize, sum: f64 },

    #[error("path enumeration for gap ({u}, {v}) exceeded {limit} paths")]
    TooManyPaths { u: usize, v: usize, limit: usize },

    #[error("trajectory sampling from {origin} to {dest} hit the length cap {hits} times; try more negative reward weights")]
    SamplingCap { origin: usize, dest: usize, hits: usize },

    #[error("objective is not finite at the starting point: {0}")]
    NonFiniteStart(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to malformed input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RewardOverflow { .. }
                | Error::Singular { .. }
                | Error::Residual { .. }
                | Error::InvalidSolution(_)
                | Error::Unreachable { .. }
                | Error::NotConverged { .. }
                | Error::UnnormalizedPolicy { .. }
                | Error::TooManyPaths { .. }
                | Error::SamplingCap { .. }
                | Error::NonFiniteStart(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
