//! Learning-rate adaptation for a larger minibatch.
//!
//! Scaling the minibatch by `q` cuts the iteration count by `q`; the step is
//! chosen so that `q` small steps and one large step contract the error by the
//! same factor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LrError {
    #[error("alpha_base * c = {0} must lie in (0, 1)")]
    NotAContraction(f64),
    #[error("q = {0} must be at least 1")]
    ShrinkingMinibatch(f64),
    #[error("mu = {0} must lie in (0, 1]")]
    BadMu(f64),
    #[error("{0} must be positive and finite")]
    NonPositive(&'static str),
    #[error("nonpositive exponent base {0}")]
    BadBase(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrConfig {
    pub alpha_base: f64,
    /// Strong-convexity constant of the objective.
    pub c: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    pub iters_base: u64,
    /// Minibatch ratio `k_star / k_base`.
    pub q: f64,
}

fn default_mu() -> f64 {
    1.0
}

impl LrConfig {
    pub fn new(alpha_base: f64, c: f64, iters_base: u64, q: f64) -> Self {
        LrConfig {
            alpha_base,
            c,
            mu: 1.0,
            iters_base,
            q,
        }
    }

    pub fn from_minibatch(alpha_base: f64, c: f64, iters_base: u64, k_star: u32, k_base: u32) -> Self {
        LrConfig::new(alpha_base, c, iters_base, k_star as f64 / k_base as f64)
    }

    pub fn with_mu(self, mu: f64) -> Self {
        LrConfig { mu, ..self }
    }

    fn validate(&self) -> Result<(), LrError> {
        for (name, v) in [("alpha_base", self.alpha_base), ("c", self.c), ("q", self.q)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(LrError::NonPositive(name));
            }
        }
        if self.iters_base == 0 {
            return Err(LrError::NonPositive("iters_base"));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(LrError::BadMu(self.mu));
        }
        let ac = self.alpha_base * self.c;
        if ac >= 1.0 {
            return Err(LrError::NotAContraction(ac));
        }
        if self.q < 1.0 {
            return Err(LrError::ShrinkingMinibatch(self.q));
        }
        Ok(())
    }
}

fn adapted(alpha_base: f64, c: f64, q: f64) -> f64 {
    if q == 1.0 {
        return alpha_base;
    }
    // 1 - (1 - a c)^q, computed without cancellation
    -(q * (-alpha_base * c).ln_1p()).exp_m1() / c
}

/// `alpha* = (1 - (1 - alpha_base c)^q) / c`.
pub fn adapted_learning_rate(cfg: &LrConfig) -> Result<f64, LrError> {
    cfg.validate()?;
    Ok(adapted(cfg.alpha_base, cfg.c, cfg.q))
}

/// As [`adapted_learning_rate`] with `c * mu` in place of `c`, so both sides
/// of the contraction match when `mu < 1`.
pub fn adapted_learning_rate_with_mu(cfg: &LrConfig) -> Result<f64, LrError> {
    cfg.validate()?;
    Ok(adapted(cfg.alpha_base, cfg.c * cfg.mu, cfg.q) / cfg.mu)
}

/// `(1 - alpha_base c mu)^(iters - 1) - (1 - alpha* c mu)^(iters / q - 1)`.
pub fn contraction_residual(cfg: &LrConfig, alpha_star: f64) -> Result<f64, LrError> {
    cfg.validate()?;
    let base_small = 1.0 - cfg.alpha_base * cfg.c * cfg.mu;
    let base_large = 1.0 - alpha_star * cfg.c * cfg.mu;
    for b in [base_small, base_large] {
        if !(b > 0.0) {
            return Err(LrError::BadBase(b));
        }
    }
    let n = cfg.iters_base as f64;
    let lhs = ((n - 1.0) * base_small.ln()).exp();
    let rhs = ((n / cfg.q - 1.0) * base_large.ln()).exp();
    Ok(lhs - rhs)
}
