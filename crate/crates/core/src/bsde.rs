//! The quadratic-in-z, exponential-in-y generator, its truncations and
//! Legendre-Fenchel transform, and the backward regression Monte Carlo
//! solver for the characterizing BSDE with terminal condition Y_T = 0.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Coefficients, MarketPaths, TimeGrid};
use crate::preferences::Preferences;
use crate::regression::{mean_stderr, ConditionalRegression};

/// Argument cap for the y-exponential when no truncation is configured.
const EXP_ARG_HARD_CAP: f64 = 700.0;

/// Exponential-moment parameters (p, q) with the q threshold enforced.
///
/// The lower bound on q is exactly what makes the relative-entropy
/// coefficient `1 - 1/(2p) + (1-gamma)/(2p gamma) + (1-gamma)(gamma+2)/(2 gamma^2 q)`
/// strictly positive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AssumptionParams {
    pub p: f64,
    pub q: f64,
}

impl AssumptionParams {
    pub fn q_threshold(p: f64, gamma: f64) -> f64 {
        (p * (gamma - 1.0) * (gamma + 2.0) / (gamma * (1.0 + 2.0 * (p - 1.0) * gamma))).max(1.0)
    }

    pub fn new(p: f64, q: f64, gamma: f64) -> Result<Self> {
        if !(p > 1.0) {
            return Err(Error::InvalidParameter(format!("p must be > 1, got {p}")));
        }
        let thr = Self::q_threshold(p, gamma);
        if !(q > thr) {
            return Err(Error::InvalidParameter(format!(
                "q must exceed max{{p(g-1)(g+2)/(g(1+2(p-1)g)), 1}} = {thr}, got {q}"
            )));
        }
        let params = Self { p, q };
        debug_assert!(params.entropy_coefficient(gamma) > 0.0);
        Ok(params)
    }

    /// `1 - 1/(2p) + (1-gamma)/(2p gamma) + (1-gamma)(gamma+2)/(2 gamma^2 q)`.
    pub fn entropy_coefficient(&self, gamma: f64) -> f64 {
        1.0 - 1.0 / (2.0 * self.p) + (1.0 - gamma) / (2.0 * self.p * gamma)
            + (1.0 - gamma) * (gamma + 2.0) / (2.0 * gamma * gamma * self.q)
    }
}

fn exp_term(y: f64, prefs: &Preferences, cap: Option<f64>) -> Result<f64> {
    let arg = prefs.exp_rate() * y; // -(psi/theta) y, positive rate
    match cap {
        Some(m) => Ok(arg.exp().min(m)),
        None => {
            if arg > EXP_ARG_HARD_CAP {
                Err(Error::Overflow(format!(
                    "exp(-(psi/theta) y) overflows at y = {y} with no truncation enabled"
                )))
            } else {
                Ok(arg.exp())
            }
        }
    }
}

/// The y- and coefficient-dependent part of the generator shared by H and J:
/// `(theta/psi) delta^psi e^{-(psi/theta) y} + (1-gamma)/(2 gamma) mu'Sigma^{-1}mu
///  + (1-gamma) r - delta theta`.
fn generator_tail(y: f64, coeffs: &Coefficients, prefs: &Preferences, cap: Option<f64>) -> Result<f64> {
    let g = prefs.gamma;
    Ok(prefs.theta / prefs.psi * prefs.delta.powf(prefs.psi) * exp_term(y, prefs, cap)?
        + (1.0 - g) / (2.0 * g) * coeffs.mpr_sq()
        + (1.0 - g) * coeffs.r
        - prefs.delta * prefs.theta)
}

/// Generator
/// `H(t,y,z) = z (I_n/2 + (1-gamma)/(2 gamma) sigma'Sigma^{-1}sigma) z'
///  + (1-gamma)/gamma mu'Sigma^{-1}sigma z' + tail(y)`.
///
/// `z` is the row vector of the BSDE's martingale part, passed as an n-vector.
pub fn generator_h(y: f64, z: &DVector<f64>, coeffs: &Coefficients, prefs: &Preferences) -> Result<f64> {
    generator_h_capped(y, z, coeffs, prefs, None)
}

fn generator_h_capped(
    y: f64,
    z: &DVector<f64>,
    coeffs: &Coefficients,
    prefs: &Preferences,
    cap: Option<f64>,
) -> Result<f64> {
    let g = prefs.gamma;
    let proj = coeffs.projection();
    let quad = 0.5 * z.norm_squared()
        + (1.0 - g) / (2.0 * g) * (z.transpose() * proj * z)[(0, 0)];
    let lin = (1.0 - g) / g * coeffs.mu_sig_row().dot(z);
    Ok(quad + lin + generator_tail(y, coeffs, prefs, cap)?)
}

/// Truncated generator H^{m,n,k}: the y-exponential is clamped at `m`, the
/// positive part survives only while the running integral
/// `int |r| + int mu'Sigma^{-1}mu` stays below `n_level`, the negative part
/// only while it stays below `k_level`.
#[allow(clippy::too_many_arguments)]
pub fn generator_truncated(
    y: f64,
    z: &DVector<f64>,
    m: f64,
    n_level: f64,
    k_level: f64,
    running_integral: f64,
    coeffs: &Coefficients,
    prefs: &Preferences,
) -> Result<f64> {
    let h_m = generator_h_capped(y, z, coeffs, prefs, Some(m))?;
    let pos = if running_integral <= n_level { h_m.max(0.0) } else { 0.0 };
    let neg = if running_integral <= k_level { (-h_m).max(0.0) } else { 0.0 };
    Ok(pos - neg)
}

/// Legendre-Fenchel transform `J(t,y,l) = inf_z (H(t,y,z) - z l)`:
/// `-1/2 (l + (gamma-1)/gamma sigma'Sigma^{-1}mu)' (I_n + (1-gamma)/gamma sigma'Sigma^{-1}sigma)^{-1}
///  (l + ...) + tail(y)`.
pub fn fenchel_transform_j(
    y: f64,
    l: &DVector<f64>,
    coeffs: &Coefficients,
    prefs: &Preferences,
) -> Result<f64> {
    let g = prefs.gamma;
    let n = l.len();
    let proj = coeffs.projection();
    let inner = DMatrix::identity(n, n) + (1.0 - g) / g * proj;
    // eigenvalues of the inner matrix are 1 or 1/gamma, so it is invertible
    // for any gamma > 1
    let inner_inv = inner
        .try_inverse()
        .ok_or_else(|| Error::Singular("Fenchel inner matrix singular".into()))?;
    let centered = l + (g - 1.0) / g * (coeffs.sigma.transpose() * coeffs.sigma_big_inv() * &coeffs.mu);
    let quad = -0.5 * (centered.transpose() * inner_inv * &centered)[(0, 0)];
    Ok(quad + generator_tail(y, coeffs, prefs, None)?)
}

/// The z-gradient of H, i.e. the maximizer u* attaining
/// `H(y,z) = J(y,u*) + z u*`:
/// `u* = (I_n + (1-gamma)/gamma sigma'Sigma^{-1}sigma) z + (1-gamma)/gamma sigma'Sigma^{-1}mu`.
pub fn maximizer_u_star(z: &DVector<f64>, coeffs: &Coefficients, prefs: &Preferences) -> DVector<f64> {
    let g = prefs.gamma;
    let n = z.len();
    let proj = coeffs.projection();
    (DMatrix::identity(n, n) + (1.0 - g) / g * proj) * z
        + (1.0 - g) / g * (coeffs.sigma.transpose() * coeffs.sigma_big_inv() * &coeffs.mu)
}

/// Solver configuration. Defaults follow the scheme's stabilization choices:
/// exponential cap e^50 (active cap flags the run as non-converged in m) and
/// a Z clamp at 10x the largest observed market price of risk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub basis_degree: usize,
    /// Cap m on e^{-(psi/theta) y}; `f64::INFINITY` disables clamping
    /// (then the hard overflow cap applies).
    pub truncation_m: f64,
    /// Positive-part stopping level n (running-integral units).
    pub n_level: f64,
    /// Negative-part stopping level k.
    pub k_level: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Clamp on |Z|; `None` selects 10 * max sqrt(mu'Sigma^{-1}mu) over paths.
    pub z_cap: Option<f64>,
    /// Number of disjoint path batches for the Y_0 standard error (0 disables).
    pub stderr_batches: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            basis_degree: 3,
            truncation_m: 50f64.exp(),
            n_level: f64::INFINITY,
            k_level: f64::INFINITY,
            newton_tol: 1e-12,
            newton_max_iter: 50,
            z_cap: None,
            stderr_batches: 20,
        }
    }
}

/// Backward-scheme output: (Y, Z) on the grid plus regression diagnostics.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub n: usize,
    pub y0: f64,
    /// Standard error of Y_0 across disjoint path batches (NaN if disabled).
    pub y0_stderr: f64,
    /// Per-step RMS regression residual of the conditional mean of Y.
    pub residuals: Vec<f64>,
    pub z_cap: f64,
    pub z_cap_hits: usize,
    /// True when the exponential clamp never activated at the solution.
    pub m_converged: bool,
    pub config: SolverConfig,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl BsdeSolution {
    pub fn y_at(&self, path: usize, step: usize) -> f64 {
        self.y[path * self.grid.n_times() + step]
    }

    pub fn z_at(&self, path: usize, step: usize) -> DVector<f64> {
        let base = (path * self.grid.steps + step) * self.n;
        DVector::from_column_slice(&self.z[base..base + self.n])
    }

    /// Largest |Z| over all paths and steps.
    pub fn max_z_norm(&self) -> f64 {
        let mut best: f64 = 0.0;
        for p in 0..self.n_paths {
            for s in 0..self.grid.steps {
                best = best.max(self.z_at(p, s).norm());
            }
        }
        best
    }
}

/// Strictly increasing scalar root find: Newton from `y0` guarded by an
/// expanding bracket with bisection fallback. `f` must be nondecreasing.
fn solve_increasing<F, D>(f: F, fprime: D, y_init: f64, tol: f64, max_iter: usize) -> Option<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    // bracket the root
    let mut lo = y_init - 1.0;
    let mut hi = y_init + 1.0;
    let mut width = 1.0;
    for _ in 0..200 {
        if f(lo) <= 0.0 {
            break;
        }
        width *= 2.0;
        lo -= width;
    }
    let mut width = 1.0;
    for _ in 0..200 {
        if f(hi) >= 0.0 {
            break;
        }
        width *= 2.0;
        hi += width;
    }
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return None;
    }
    let mut y = y_init.clamp(lo, hi);
    for _ in 0..max_iter {
        let fy = f(y);
        if fy.abs() <= tol {
            return Some(y);
        }
        if fy > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let d = fprime(y);
        let newton = if d.abs() > 1e-300 { y - fy / d } else { f64::NAN };
        y = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    // accept the bracket midpoint when it is tight enough
    if (hi - lo).abs() <= tol.max(1e-14) {
        Some(0.5 * (lo + hi))
    } else {
        None
    }
}

/// Backward regression Monte Carlo for the BSDE on pre-simulated paths.
///
/// Per step i (from N-1 down to 0): the conditional mean of Y_{i+1} is fitted
/// on the polynomial basis of the Markov state; Z_i is the fitted regression
/// of the centered product (Y_{i+1} - E_i[Y_{i+1}]) dW_i / dt; Y_i solves the
/// implicit scalar equation y = E_i[Y_{i+1}] + H(t_i, y, Z_i) dt, which has a
/// unique root because y - dt H(t_i, y, z) is strictly increasing in y.
pub fn solve_bsde_on(
    paths: &MarketPaths,
    prefs: &Preferences,
    config: &SolverConfig,
) -> Result<BsdeSolution> {
    let mut sol = solve_inner(paths, prefs, config)?;
    if config.stderr_batches > 1 && paths.n_paths >= 2 * config.stderr_batches {
        let b = config.stderr_batches;
        let mut batch_y0 = Vec::with_capacity(b);
        for i in 0..b {
            let lo = i * paths.n_paths / b;
            let hi = (i + 1) * paths.n_paths / b;
            let sub = paths.subset(lo..hi);
            batch_y0.push(solve_inner(&sub, prefs, config)?.y0);
        }
        let (_, se) = mean_stderr(&batch_y0);
        sol.y0_stderr = se;
    }
    Ok(sol)
}

fn solve_inner(paths: &MarketPaths, prefs: &Preferences, config: &SolverConfig) -> Result<BsdeSolution> {
    let grid = paths.grid;
    let np = paths.n_paths;
    let n = paths.n;
    let nt = grid.n_times();
    let dt = grid.dt();

    // coefficients and running truncation integrals, per (path, step)
    let mut coeffs: Vec<Coefficients> = Vec::with_capacity(np * nt);
    let mut run_int = vec![0.0; np * nt];
    let mut max_mpr: f64 = 0.0;
    for p in 0..np {
        let mut acc = 0.0;
        for s in 0..nt {
            let c = paths.coefficients_at(p, s)?;
            run_int[p * nt + s] = acc;
            acc += (c.r.abs() + c.mpr_sq()) * dt;
            max_mpr = max_mpr.max(c.mpr_sq().sqrt());
            coeffs.push(c);
        }
    }
    let z_cap = config.z_cap.unwrap_or_else(|| (10.0 * max_mpr).max(1.0));

    let mut y = vec![0.0; np * nt]; // terminal condition Y_N = 0 exactly
    let mut z = vec![0.0; np * grid.steps * n];
    let mut residuals = vec![0.0; grid.steps];
    let mut z_cap_hits = 0usize;
    let mut m_cap_active = false;

    let truncated = config.truncation_m.is_finite()
        || config.n_level.is_finite()
        || config.k_level.is_finite();
    let m = if config.truncation_m.is_finite() { config.truncation_m } else { f64::INFINITY };

    let exp_coeff = prefs.theta / prefs.psi * prefs.delta.powf(prefs.psi); // < 0
    let exp_rate = prefs.exp_rate(); // > 0

    for step in (0..grid.steps).rev() {
        let states = DMatrix::from_fn(np, paths.state_dim, |p, j| paths.state(p, step)[j]);
        let reg = ConditionalRegression::new(&states, config.basis_degree)
            .map_err(|e| Error::RankDeficient { step, detail: e.to_string() })?;

        let y_next = DVector::from_fn(np, |p, _| y[p * nt + step + 1]);
        let (pred, resid) = reg.fit(&y_next)?;
        residuals[step] = resid;

        // Z from the centered martingale-increment regression (a degenerate
        // zero-length step carries no Brownian information, so Z stays 0)
        let mut z_step = DMatrix::zeros(np, n);
        if dt > 0.0 {
            for j in 0..n {
                let target = DVector::from_fn(np, |p, _| {
                    (y_next[p] - pred[p]) * paths.dw(p, step)[j] / dt
                });
                let (fitted, _) = reg.fit(&target)?;
                z_step.set_column(j, &fitted);
            }
        }

        for p in 0..np {
            let mut zp = z_step.row(p).transpose();
            let norm = zp.norm();
            if norm > z_cap {
                zp *= z_cap / norm;
                z_cap_hits += 1;
            }
            for j in 0..n {
                z[(p * grid.steps + step) * n + j] = zp[j];
            }

            let c = &coeffs[p * nt + step];
            let ri = run_int[p * nt + step];
            let target = pred[p];
            let gen = |yy: f64| -> f64 {
                let h = if truncated {
                    generator_truncated(yy, &zp, m, config.n_level, config.k_level, ri, c, prefs)
                } else {
                    generator_h_capped(yy, &zp, c, prefs, Some(EXP_ARG_HARD_CAP.exp()))
                };
                h.unwrap_or(f64::NAN)
            };
            let f = |yy: f64| yy - target - dt * gen(yy);
            // dH/dy through the exponential term only; zero where clamped or
            // where the truncation indicators kill the relevant part
            let fp = |yy: f64| {
                let e = (exp_rate * yy).exp();
                let de = if e < m { exp_coeff * exp_rate * e } else { 0.0 };
                1.0 - dt * de
            };
            let root = solve_increasing(f, fp, target, config.newton_tol, config.newton_max_iter)
                .ok_or(Error::NewtonNonConvergence { step, path: p })?;
            y[p * nt + step] = root;
            if (exp_rate * root).exp() >= m {
                m_cap_active = true;
            }
        }
    }

    let y0_samples: Vec<f64> = (0..np).map(|p| y[p * nt]).collect();
    let (y0, _) = mean_stderr(&y0_samples);

    Ok(BsdeSolution {
        grid,
        n_paths: np,
        n,
        y0,
        y0_stderr: f64::NAN,
        residuals,
        z_cap,
        z_cap_hits,
        m_converged: !m_cap_active,
        config: config.clone(),
        y,
        z,
    })
}

/// Convenience wrapper: simulate paths for `model` and solve.
pub fn solve_bsde(
    model: &crate::market::MarketModel,
    prefs: &Preferences,
    grid: TimeGrid,
    n_paths: usize,
    config: &SolverConfig,
    seed: u64,
) -> Result<(MarketPaths, BsdeSolution)> {
    let paths = crate::market::simulate_factors(model, grid, n_paths, seed)?;
    let sol = solve_bsde_on(&paths, prefs, config)?;
    Ok((paths, sol))
}

/// Deterministic-coefficient oracle: fourth-order Runge-Kutta on
/// `Y' = -H(t, Y, 0)`, `Y(T) = 0`, integrated backward on a refinement of the
/// grid (at least 10x its steps). Returns Y at the grid points, index 0 = t_0.
///
/// `delta = 0` is permitted here (the drift becomes linear in the
/// coefficients), which the oracle's own examples use.
pub fn ode_oracle<C>(prefs: &Preferences, coeff_fn: C, grid: TimeGrid, refine: usize) -> Result<Vec<f64>>
where
    C: Fn(f64) -> Coefficients,
{
    let refine = refine.max(10);
    let h = grid.dt() / refine as f64;
    if grid.horizon > 0.0 && !(h > 0.0 && h.is_finite()) {
        return Err(Error::Numerical("step size underflow in ode_oracle".into()));
    }
    // at z = 0 the generator reduces to its tail; delta = 0 is tolerated here
    // by dropping the (then vanishing) consumption term explicitly
    let rhs = |t: f64, y: f64| -> Result<f64> {
        let c = coeff_fn(t);
        let g = prefs.gamma;
        let tail = if prefs.delta == 0.0 {
            (1.0 - g) / (2.0 * g) * c.mpr_sq() + (1.0 - g) * c.r
        } else {
            generator_tail(y, &c, prefs, None)?
        };
        Ok(-tail)
    };

    let mut out = vec![0.0; grid.n_times()];
    let mut y = 0.0;
    // march backward from T
    for gi in (0..grid.steps).rev() {
        for sub in (0..refine).rev() {
            let t = grid.t(gi) + h * (sub + 1) as f64;
            let k1 = rhs(t, y)?;
            let k2 = rhs(t - 0.5 * h, y - 0.5 * h * k1)?;
            let k3 = rhs(t - 0.5 * h, y - 0.5 * h * k2)?;
            let k4 = rhs(t - h, y - h * k3)?;
            y -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out[gi] = y;
    }
    Ok(out)
}
