//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LeakError {
    /// A configuration field failed validation. `path` is a JSON-style field path.
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    /// A scalar argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The per-capita budget does not cover the participation residual.
    #[error("infeasible budget: B/s - l = {gap:.6e} <= 0")]
    Infeasible { gap: f64 },

    /// A virtual-cost curve is not monotone, so it cannot be inverted.
    #[error("regularity failure in group {group} at c = {cost:.6}: {detail}")]
    Regularity { group: usize, cost: f64, detail: String },

    /// An operation was called outside the regime it is valid in.
    #[error("regime error: {0}")]
    Regime(String),

    /// A solver precondition (named in the message) does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("payment undefined at c = {cost:.6} in group {group}: allocation is zero")]
    UndefinedPayment { group: usize, cost: f64 },

    #[error("variance is infinite: allocation vanishes where the adversary puts mass")]
    InfiniteVariance,

    #[error("no participants in replication {replication}")]
    EmptyMarket { replication: u64 },

    #[error("solver did not converge: {0}")]
    NoConvergence(String),
}

pub type Result<T> = std::result::Result<T, LeakError>;

pub(crate) fn config_err(path: impl Into<String>, message: impl Into<String>) -> LeakError {
    LeakError::Config { path: path.into(), message: message.into() }
}
