use thiserror::Error;

/// Errors raised by the spectral laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("empty {what}")]
    Empty { what: &'static str },

    #[error("dimension mismatch: {left} vs {right} ({context})")]
    DimensionMismatch {
        left: usize,
        right: usize,
        context: &'static str,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("operator is {found} but {required} is required ({context})")]
    Positivity {
        found: &'static str,
        required: &'static str,
        context: &'static str,
    },

    #[error("vector is not in the Cameron-Martin space: mode {mode} has zero prior variance but coefficient {value}")]
    NotInCameronMartin { mode: usize, value: f64 },

    #[error("sum overflowed in {context}; reduce the truncation level or use faster-decaying laws")]
    Overflow { context: &'static str },

    #[error("condition (L.1) fails: {reason}; the strong-concavity certificate is unavailable")]
    Coercivity { reason: String },

    #[error("covariance not positive definite at mode {mode}: 1 + n*mu*lambda = {value} <= 0")]
    NotPositiveDefinite { mode: usize, value: f64 },

    #[error("hypothesis unmet: eps1 = {eps1} exceeds mu/6 = {limit}; n too small for the (C.2) envelope")]
    HypothesisUnmet { eps1: f64, limit: f64 },

    #[error("(W.4) violated at this (n, delta): {reason}")]
    W4Violated { reason: String },

    #[error("non-admissible (psi, zeta) pair: residual changes sign {sign_changes} times on the bracket grid")]
    NonAdmissiblePair { sign_changes: usize },

    #[error("bound is vacuous: lambda_min = {lambda_min} <= 0")]
    VacuousBound { lambda_min: f64 },

    #[error("KL divergence undefined: reference variance at mode {mode} is zero")]
    UndefinedDivergence { mode: usize },

    #[error("trajectory diverged in replica {replica} at step {step} (norm {norm:e})")]
    Diverged { replica: u64, step: u64, norm: f64 },

    #[error("assumption audit failed: {failed}")]
    AuditFailed { failed: String },

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite<T: crate::Real>(x: T, context: &str) -> Result<T> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}
