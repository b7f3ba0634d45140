//! Epstein-Zin preference parameters together with the primal aggregator,
//! bequest utility, and their convex-dual counterparts.
//!
//! The parameter range is `gamma > 1`, `psi > 1`, `delta > 0`, which makes
//! the derived exponent `theta = (1 - gamma)/(1 - 1/psi)` strictly negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epstein-Zin preference parameters.
///
/// `theta` is derived from `gamma` and `psi` at construction and kept
/// alongside them so downstream formulas never recompute it inconsistently.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Preferences {
    /// Relative risk aversion, > 1.
    pub gamma: f64,
    /// Elasticity of intertemporal substitution, > 1.
    pub psi: f64,
    /// Discount rate, > 0.
    pub delta: f64,
    /// (1 - gamma) / (1 - 1/psi), < 0.
    pub theta: f64,
}

/// theta = (1 - gamma)/(1 - 1/psi); strictly negative on the valid range.
pub fn derive_theta(gamma: f64, psi: f64) -> Result<f64> {
    if !(gamma > 1.0) {
        return Err(Error::Domain(format!("gamma must be > 1, got {gamma}")));
    }
    if !(psi > 1.0) {
        return Err(Error::Domain(format!("psi must be > 1, got {psi}")));
    }
    Ok((1.0 - gamma) / (1.0 - 1.0 / psi))
}

impl Preferences {
    pub fn new(gamma: f64, psi: f64, delta: f64) -> Result<Self> {
        let theta = derive_theta(gamma, psi)?;
        if !(delta > 0.0) {
            return Err(Error::Domain(format!("delta must be > 0, got {delta}")));
        }
        debug_assert!(theta < 0.0);
        Ok(Self { gamma, psi, delta, theta })
    }

    /// Consumption fraction exponent: the optimal consumption rate is
    /// `delta^psi * exp(-(psi/theta) * y)` per unit wealth; `-psi/theta > 0`.
    pub fn exp_rate(&self) -> f64 {
        -self.psi / self.theta
    }

    /// Primal aggregator
    /// `f(c, v) = delta * c^{1-1/psi}/(1-1/psi) * ((1-gamma) v)^{1-1/theta} - delta*theta*v`.
    ///
    /// Requires `c >= 0` and `v < 0` (so `(1-gamma) v > 0`); powers are taken
    /// through exp/log of positive arguments. `c = 0` is handled exactly: the
    /// first term vanishes since `1 - 1/psi > 0`.
    pub fn aggregator_f(&self, c: f64, v: f64) -> Result<f64> {
        if !(v < 0.0) {
            return Err(Error::Domain(format!("aggregator_f requires v < 0, got {v}")));
        }
        if !(c >= 0.0) {
            return Err(Error::Domain(format!("aggregator_f requires c >= 0, got {c}")));
        }
        let one_m_inv_psi = 1.0 - 1.0 / self.psi;
        let gv = (1.0 - self.gamma) * v; // > 0
        let first = if c == 0.0 {
            0.0
        } else {
            self.delta / one_m_inv_psi
                * (one_m_inv_psi * c.ln() + (1.0 - 1.0 / self.theta) * gv.ln()).exp()
        };
        Ok(first - self.delta * self.theta * v)
    }

    /// Bequest utility `V(w) = w^{1-gamma}/(1-gamma)`, negative for gamma > 1.
    pub fn bequest_v(&self, w: f64) -> Result<f64> {
        if !(w > 0.0) {
            return Err(Error::Domain(format!("bequest_v requires w > 0, got {w}")));
        }
        Ok(((1.0 - self.gamma) * w.ln()).exp() / (1.0 - self.gamma))
    }

    /// Dual aggregator
    /// `g(d, u) = delta^psi * d^{1-psi}/(psi-1) * ((1-gamma) u)^{1-gamma*psi/theta} - delta*theta*u`.
    pub fn dual_aggregator_g(&self, d: f64, u: f64) -> Result<f64> {
        if !(d > 0.0) {
            return Err(Error::Domain(format!("dual_aggregator_g requires d > 0, got {d}")));
        }
        if !(u < 0.0) {
            return Err(Error::Domain(format!("dual_aggregator_g requires u < 0, got {u}")));
        }
        let gu = (1.0 - self.gamma) * u; // > 0
        let ex = 1.0 - self.gamma * self.psi / self.theta;
        let first = (self.psi * self.delta.ln() + (1.0 - self.psi) * d.ln() + ex * gu.ln()).exp()
            / (self.psi - 1.0);
        Ok(first - self.delta * self.theta * u)
    }

    /// Dual terminal utility `U(d) = gamma/(1-gamma) * d^{(gamma-1)/gamma}`.
    pub fn dual_terminal_u(&self, d: f64) -> Result<f64> {
        if !(d > 0.0) {
            return Err(Error::Domain(format!("dual_terminal_u requires d > 0, got {d}")));
        }
        let ex = (self.gamma - 1.0) / self.gamma;
        Ok(self.gamma / (1.0 - self.gamma) * (ex * d.ln()).exp())
    }
}
