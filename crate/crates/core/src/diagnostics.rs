//! Simulation-based verification: exponential-moment estimates with heavy-tail
//! flags, closed-form parameter conditions for the factor models, the
//! martingale/entropy check for the stochastic exponential Q, and the
//! class-(D) bound processes.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bsde::{AssumptionParams, BsdeSolution};
use crate::error::{Error, Result};
use crate::market::{MarketModel, MarketPaths};
use crate::preferences::Preferences;
use crate::regression::{batch_mean_stderr, mean_stderr};

/// Largest exponent fed to `exp` before the estimate is reported as infinite.
const EXP_ARG_LIMIT: f64 = 700.0;

/// Monte Carlo estimate of `E[e^X]` from per-path exponents.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExponentialMoment {
    pub mean: f64,
    pub stderr: f64,
    /// The top 1% of paths contribute more than half of the estimate; the
    /// number should not be trusted even if finite.
    pub tail_heavy: bool,
    /// False when some exponent overflows double precision (mean = inf).
    pub finite: bool,
}

/// Estimates `E[e^X]` given the per-path exponents `X`, with a batched
/// standard error and a dominance flag for the upper tail.
pub fn estimate_exponential_moment(exponents: &[f64]) -> ExponentialMoment {
    if exponents.iter().any(|x| *x > EXP_ARG_LIMIT || !x.is_finite()) {
        return ExponentialMoment {
            mean: f64::INFINITY,
            stderr: f64::INFINITY,
            tail_heavy: true,
            finite: false,
        };
    }
    let values: Vec<f64> = exponents.iter().map(|x| x.exp()).collect();
    let (mean, stderr) = if values.len() >= 40 {
        batch_mean_stderr(&values, 20)
    } else {
        mean_stderr(&values)
    };
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = sorted.len().div_ceil(100);
    let top_sum: f64 = sorted[..top].iter().sum();
    let total: f64 = sorted.iter().sum();
    ExponentialMoment {
        mean,
        stderr,
        tail_heavy: total > 0.0 && top_sum > 0.5 * total,
        finite: true,
    }
}

/// One closed-form inequality, with both sides evaluated numerically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// True when `lhs < rhs` (or `<=` where the condition is weak; the name
    /// says which).
    pub satisfied: bool,
}

fn strict(name: &str, lhs: f64, rhs: f64) -> ConditionCheck {
    ConditionCheck { name: name.into(), lhs, rhs, satisfied: lhs < rhs }
}

fn weak(name: &str, lhs: f64, rhs: f64) -> ConditionCheck {
    ConditionCheck { name: name.into(), lhs, rhs, satisfied: lhs <= rhs }
}

/// Parameter conditions guaranteeing the exponential integrability the
/// verification arguments need, per model family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConditions {
    pub model: String,
    pub q: f64,
    pub gamma: f64,
    pub horizon: f64,
    /// Every sub-inequality evaluated, grouped by alternative.
    pub checks: Vec<ConditionCheck>,
    /// Whether some alternative holds in full.
    pub satisfied: bool,
}

/// Evaluates the sufficient parameter conditions for exponential
/// integrability of the market coefficients over `[0, horizon]`:
/// two alternatives for the stochastic-volatility model, two for the
/// linear-diffusion excess return, positivity plus integrability for the
/// square-root rate. Constant coefficients are unconditionally fine, and a
/// clamped path-dependent rate inherits its base model's conditions.
pub fn check_model_conditions(
    model: &MarketModel,
    q: f64,
    gamma: f64,
    horizon: f64,
) -> Result<ModelConditions> {
    if !(q > 1.0) {
        return Err(Error::InvalidParameter("q must be > 1".into()));
    }
    if !(gamma > 1.0) {
        return Err(Error::InvalidParameter("gamma must be > 1".into()));
    }
    let t = horizon;
    let (name, checks, satisfied) = match model {
        MarketModel::Constant { .. } => {
            ("constant".to_string(), vec![], true)
        }
        MarketModel::Heston { b, l, a, lambda, sigma, .. } => {
            let c1a = weak("alt1: 4bl <= a^2", 4.0 * b * l, a * a);
            let c1b = strict(
                "alt1: q T lambda^2 a^2 (e^{bT}-1) < 2 b sigma^2",
                q * t * lambda * lambda * a * a * ((b * t).exp() - 1.0),
                2.0 * b * sigma * sigma,
            );
            let c2a = strict("alt2: a^2 < 2bl", a * a, 2.0 * b * l);
            let c2b = strict(
                "alt2: 2 q lambda^2 a^2 < b^2 sigma^2",
                2.0 * q * lambda * lambda * a * a,
                b * b * sigma * sigma,
            );
            let sat = (c1a.satisfied && c1b.satisfied) || (c2a.satisfied && c2b.satisfied);
            ("heston".to_string(), vec![c1a, c1b, c2a, c2b], sat)
        }
        MarketModel::LinearDiffusion { b, a, lambda1, .. } => {
            let c1 = strict(
                "alt1: 2 q lambda1^2 T a^2 (e^{2bT}-1)/b < 1",
                2.0 * q * lambda1 * lambda1 * t * a * a * ((2.0 * b * t).exp() - 1.0) / b,
                1.0,
            );
            let c2 = strict(
                "alt2: 2 q lambda1^2 < b^2/(2 a^2)",
                2.0 * q * lambda1 * lambda1,
                b * b / (2.0 * a * a),
            );
            let sat = c1.satisfied || c2.satisfied;
            ("linear_diffusion".to_string(), vec![c1, c2], sat)
        }
        MarketModel::Cir { b, l, a, .. } => {
            let c1 = strict("positivity: a^2 < 2b", a * a, 2.0 * b);
            let c2 = strict(
                "integrability: q (gamma-1) < l^2/(2 a^2)",
                q * (gamma - 1.0),
                l * l / (2.0 * a * a),
            );
            let sat = c1.satisfied && c2.satisfied;
            ("cir".to_string(), vec![c1, c2], sat)
        }
        MarketModel::PathDependentRate { base, .. } => {
            let inner = check_model_conditions(base, q, gamma, horizon)?;
            (
                format!("path_dependent_rate({})", inner.model),
                inner.checks,
                inner.satisfied,
            )
        }
    };
    Ok(ModelConditions { model: name, q, gamma, horizon: t, checks, satisfied })
}

/// Everything measured about the stochastic exponential
/// `Q = E(int ((1-gamma) pi*' sigma + Z) dW)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleCheck {
    /// E[Q_T]; 1 for a true martingale.
    pub e_q_t: f64,
    pub e_q_t_stderr: f64,
    /// Relative entropy E[Q_T ln Q_T].
    pub entropy: f64,
    pub entropy_stderr: f64,
    /// Upper bound on the entropy implied by the exponential moments of the
    /// coefficients and of Y (infinite if any moment overflows).
    pub entropy_bound: f64,
    /// The positive combination multiplying the entropy in the bound;
    /// positivity is exactly the q-threshold restriction.
    pub coefficient: f64,
    pub entropy_within_bound: bool,
    /// Exponential moment of the running maximum of Y^+.
    pub moment_y_plus: ExponentialMoment,
    /// Exponential moment of q int mu' Sigma^{-1} mu ds.
    pub moment_mpr: ExponentialMoment,
    /// Exponential moment of 2 p gamma int r^- ds.
    pub moment_rate_neg: ExponentialMoment,
    /// Novikov-style proxy E[e^{(1/2) int |eta|^2 ds}] for the exponent of Q.
    pub novikov_proxy: ExponentialMoment,
}

/// Simulates Q along the solved paths and compares its relative entropy with
/// the closed-form bound.
pub fn martingale_check_q(
    paths: &MarketPaths,
    sol: &BsdeSolution,
    prefs: &Preferences,
    assumption: &AssumptionParams,
) -> Result<MartingaleCheck> {
    let grid = paths.grid;
    let dt = grid.dt();
    let gamma = prefs.gamma;
    let (p, q) = (assumption.p, assumption.q);
    let np = paths.n_paths;

    let mut q_t = Vec::with_capacity(np);
    let mut exp_y_plus = Vec::with_capacity(np);
    let mut exp_mpr = Vec::with_capacity(np);
    let mut exp_rate_neg = Vec::with_capacity(np);
    let mut exp_novikov = Vec::with_capacity(np);
    for pth in 0..np {
        let mut log_q = 0.0;
        let mut y_plus_max = sol.y_at(pth, 0).max(0.0);
        let mut int_mpr = 0.0;
        let mut int_rate_neg = 0.0;
        let mut int_eta_sq = 0.0;
        for s in 0..grid.steps {
            let c = paths.coefficients_at(pth, s)?;
            let z = sol.z_at(pth, s);
            // (1-gamma) pi*' sigma + Z with pi* = Sigma^{-1}(mu + sigma Z')/gamma
            let eta: DVector<f64> =
                (c.mu_sig_row() + c.projection() * &z) * ((1.0 - gamma) / gamma) + &z;
            log_q += eta.dot(&paths.dw(pth, s)) - 0.5 * eta.norm_squared() * dt;
            int_eta_sq += eta.norm_squared() * dt;
            int_mpr += c.mpr_sq() * dt;
            int_rate_neg += (-c.r).max(0.0) * dt;
            y_plus_max = y_plus_max.max(sol.y_at(pth, s + 1).max(0.0));
        }
        q_t.push(log_q);
        exp_y_plus.push(2.0 * p * y_plus_max);
        exp_mpr.push(q * int_mpr);
        exp_rate_neg.push(2.0 * p * gamma * int_rate_neg);
        exp_novikov.push(0.5 * int_eta_sq);
    }

    let q_vals: Vec<f64> = q_t.iter().map(|lq| lq.exp()).collect();
    let ent_vals: Vec<f64> = q_t.iter().map(|lq| lq.exp() * lq).collect();
    let (e_q, e_q_se) = batch_mean_stderr(&q_vals, 20);
    let (entropy, entropy_se) = batch_mean_stderr(&ent_vals, 20);

    let m_y = estimate_exponential_moment(&exp_y_plus);
    let m_mpr = estimate_exponential_moment(&exp_mpr);
    let m_r = estimate_exponential_moment(&exp_rate_neg);
    let m_nov = estimate_exponential_moment(&exp_novikov);

    let coeff = assumption.entropy_coefficient(gamma);
    let t = grid.horizon;
    let rhs = m_y.mean - (1.0 + (2.0 * p).ln()) / (2.0 * p)
        + (gamma - 1.0) * (gamma + 2.0) / (2.0 * gamma * gamma) * m_mpr.mean
        + (gamma - 1.0) * m_r.mean
        - sol.y0
        - prefs.delta * prefs.theta * t
        + (1.0 + q.ln()) / q * (1.0 - gamma) * (gamma + 2.0) / (2.0 * gamma * gamma)
        - (1.0 + (2.0 * p * gamma).ln()) / (2.0 * p * gamma) * (1.0 - gamma);
    let bound = rhs / coeff;

    Ok(MartingaleCheck {
        e_q_t: e_q,
        e_q_t_stderr: e_q_se,
        entropy,
        entropy_stderr: entropy_se,
        entropy_bound: bound,
        coefficient: coeff,
        entropy_within_bound: entropy <= bound,
        moment_y_plus: m_y,
        moment_mpr: m_mpr,
        moment_rate_neg: m_r,
        novikov_proxy: m_nov,
    })
}

/// Time profiles of the two processes whose uniform integrability carries the
/// class-(D) property:
/// `exp(2p Y^+ + 2p(gamma-1) int r^-)` and
/// `exp(q Y^- + q(gamma-1) int (r^+ + mpr^2/gamma))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassDBounds {
    /// E[.] of the first process at each grid time.
    pub means_plus: Vec<f64>,
    /// E[.] of the second process at each grid time.
    pub means_minus: Vec<f64>,
    /// Largest of the time means (both processes).
    pub sup_mean: f64,
    pub tail_heavy: bool,
    pub finite: bool,
}

pub fn class_d_bounds(
    paths: &MarketPaths,
    sol: &BsdeSolution,
    prefs: &Preferences,
    assumption: &AssumptionParams,
) -> Result<ClassDBounds> {
    let grid = paths.grid;
    let dt = grid.dt();
    let nt = grid.n_times();
    let gamma = prefs.gamma;
    let (p, q) = (assumption.p, assumption.q);
    let np = paths.n_paths;

    let mut int_rn = vec![0.0; np];
    let mut int_rp = vec![0.0; np];
    let mut means_plus = Vec::with_capacity(nt);
    let mut means_minus = Vec::with_capacity(nt);
    let mut tail = false;
    let mut finite = true;
    let mut sup = f64::NEG_INFINITY;
    for s in 0..nt {
        let mut e_plus = Vec::with_capacity(np);
        let mut e_minus = Vec::with_capacity(np);
        for pth in 0..np {
            let y = sol.y_at(pth, s);
            e_plus.push(2.0 * p * y.max(0.0) + 2.0 * p * (gamma - 1.0) * int_rn[pth]);
            e_minus.push(q * (-y).max(0.0) + q * (gamma - 1.0) * int_rp[pth]);
            if s < grid.steps {
                let c = paths.coefficients_at(pth, s)?;
                int_rn[pth] += (-c.r).max(0.0) * dt;
                int_rp[pth] += (c.r.max(0.0) + c.mpr_sq() / gamma) * dt;
            }
        }
        let mp = estimate_exponential_moment(&e_plus);
        let mm = estimate_exponential_moment(&e_minus);
        tail |= mp.tail_heavy || mm.tail_heavy;
        finite &= mp.finite && mm.finite;
        sup = sup.max(mp.mean).max(mm.mean);
        means_plus.push(mp.mean);
        means_minus.push(mm.mean);
    }
    Ok(ClassDBounds { means_plus, means_minus, sup_mean: sup, tail_heavy: tail, finite })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve_bsde_on, SolverConfig};
    use crate::market::{simulate_factors, TimeGrid};
    use approx::assert_relative_eq;

    #[test]
    fn exponential_moment_of_constant_is_exact() {
        let m = estimate_exponential_moment(&vec![0.0; 400]);
        assert_relative_eq!(m.mean, 1.0);
        assert_relative_eq!(m.stderr, 0.0);
        assert!(!m.tail_heavy);
        assert!(m.finite);
    }

    #[test]
    fn exponential_moment_flags_dominant_tail() {
        let mut xs = vec![0.0; 399];
        xs.push(20.0); // one path carries e^20 of the mass
        let m = estimate_exponential_moment(&xs);
        assert!(m.tail_heavy);
        assert!(m.finite);
    }

    #[test]
    fn exponential_moment_flags_overflow() {
        let m = estimate_exponential_moment(&[1.0, 800.0]);
        assert!(!m.finite);
        assert!(m.mean.is_infinite());
    }

    #[test]
    fn stochastic_volatility_conditions_worked_example() {
        // passes through the first alternative only
        let model = MarketModel::Heston {
            b: 1.0,
            l: 0.25,
            a: 1.0,
            lambda: 0.1,
            sigma: 1.0,
            rho: -0.5,
            x0: 0.25,
            rate: 0.02,
        };
        let out = check_model_conditions(&model, 1.1, 2.0, 1.0).unwrap();
        assert!(out.satisfied);
        assert!(out.checks[0].satisfied && out.checks[1].satisfied);
        assert!(!out.checks[2].satisfied);
        assert_relative_eq!(out.checks[0].lhs, 1.0);
        assert_relative_eq!(out.checks[0].rhs, 1.0);
        assert_relative_eq!(
            out.checks[1].lhs,
            1.1 * 0.01 * (1f64.exp() - 1.0),
            epsilon = 1e-12
        );

        // passes through the second alternative only
        let model2 = MarketModel::Heston {
            b: 1.0,
            l: 0.25,
            a: 0.5,
            lambda: 0.5,
            sigma: 1.0,
            rho: -0.5,
            x0: 0.25,
            rate: 0.02,
        };
        let out2 = check_model_conditions(&model2, 2.0, 2.0, 1.0).unwrap();
        assert!(out2.satisfied);
        assert!(!(out2.checks[0].satisfied));
        assert!(out2.checks[2].satisfied && out2.checks[3].satisfied);
    }

    #[test]
    fn square_root_rate_conditions_worked_example() {
        let model = MarketModel::Cir {
            b: 1.0,
            l: 2.0,
            a: 1.0,
            r0: 0.05,
            mu: 0.05,
            sigma: 0.2,
            eps: 0.1,
            rho: 0.0,
        };
        let ok = check_model_conditions(&model, 1.5, 2.0, 1.0).unwrap();
        assert!(ok.satisfied);
        assert_relative_eq!(ok.checks[1].lhs, 1.5);
        assert_relative_eq!(ok.checks[1].rhs, 2.0);
        // raising risk aversion to 3 breaks integrability: 1.5 * 2 >= 2
        let bad = check_model_conditions(&model, 1.5, 3.0, 1.0).unwrap();
        assert!(!bad.satisfied);
        assert!(bad.checks[0].satisfied && !bad.checks[1].satisfied);
    }

    #[test]
    fn linear_diffusion_conditions_worked_example() {
        let model = MarketModel::LinearDiffusion {
            b: 1.0,
            a: 0.2,
            sigma: 0.3,
            lambda0: 0.1,
            lambda1: 0.5,
            rho: 0.5,
            x0: 0.0,
            rate: 0.02,
        };
        let out = check_model_conditions(&model, 1.5, 2.0, 1.0).unwrap();
        assert!(out.satisfied);
        // alt2: 2*1.5*0.25 = 0.75 < 1/(2*0.04) = 12.5
        assert_relative_eq!(out.checks[1].lhs, 0.75);
        assert_relative_eq!(out.checks[1].rhs, 12.5);
        // blowing up the factor volatility kills both alternatives
        let model2 = MarketModel::LinearDiffusion {
            b: 1.0,
            a: 5.0,
            sigma: 0.3,
            lambda0: 0.1,
            lambda1: 0.5,
            rho: 0.5,
            x0: 0.0,
            rate: 0.02,
        };
        assert!(!check_model_conditions(&model2, 1.5, 2.0, 1.0).unwrap().satisfied);
    }

    #[test]
    fn constant_model_always_satisfies_conditions() {
        let model = MarketModel::Constant { r: 0.02, mu: vec![0.06], sigma: vec![vec![0.2]] };
        assert!(check_model_conditions(&model, 1.5, 2.0, 10.0).unwrap().satisfied);
    }

    #[test]
    fn martingale_and_class_d_on_reference_market() {
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let model = MarketModel::Constant { r: 0.02, mu: vec![0.06], sigma: vec![vec![0.2]] };
        let paths =
            simulate_factors(&model, TimeGrid::new(1.0, 50).unwrap(), 4000, 53).unwrap();
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let ap = AssumptionParams::new(2.0, 2.0, 2.0).unwrap();
        let chk = martingale_check_q(&paths, &sol, &prefs, &ap).unwrap();
        assert!(
            (chk.e_q_t - 1.0).abs() <= 3.0 * chk.e_q_t_stderr,
            "E[Q_T] = {} (se {})",
            chk.e_q_t,
            chk.e_q_t_stderr
        );
        assert!(chk.coefficient > 0.0);
        assert!(chk.entropy_within_bound, "{} > {}", chk.entropy, chk.entropy_bound);
        assert!(chk.entropy >= -3.0 * chk.entropy_stderr); // entropy is nonnegative
        assert!(chk.novikov_proxy.finite && !chk.novikov_proxy.tail_heavy);

        let cd = class_d_bounds(&paths, &sol, &prefs, &ap).unwrap();
        assert!(cd.finite && !cd.tail_heavy);
        assert!(cd.sup_mean.is_finite() && cd.sup_mean >= 1.0);
    }
}
