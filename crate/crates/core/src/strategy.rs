//! Candidate optimal controls, wealth simulation, recursive-utility
//! evaluation of arbitrary strategies, and the utility process G whose
//! supermartingale/martingale drift distinguishes suboptimal controls from
//! the candidate optimum.

use nalgebra::DVector;

use crate::bsde::BsdeSolution;
use crate::error::{Error, Result};
use crate::market::{MarketPaths, TimeGrid};
use crate::preferences::Preferences;
use crate::regression::{mean_stderr, ConditionalRegression};
use nalgebra::DMatrix;
use std::io::Write;

/// Fraction of initial wealth used as the positivity floor; Euler steps can
/// overshoot zero, so floored paths are flagged and excluded from averages
/// rather than absorbed.
pub const WEALTH_FLOOR_FRACTION: f64 = 1e-10;

/// Consumption, portfolio and wealth along simulated paths.
#[derive(Debug, Clone)]
pub struct StrategyPaths {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub d: usize,
    /// Initial wealth.
    pub omega: f64,
    /// Paths that hit the positivity floor at some step.
    pub floored: Vec<bool>,
    w: Vec<f64>,
    c: Vec<f64>,
    pi: Vec<f64>,
}

impl StrategyPaths {
    pub fn wealth(&self, path: usize, step: usize) -> f64 {
        self.w[path * self.grid.n_times() + step]
    }

    /// Consumption rate applied on [t_step, t_{step+1}).
    pub fn consumption(&self, path: usize, step: usize) -> f64 {
        self.c[path * self.grid.n_times() + step]
    }

    pub fn portfolio(&self, path: usize, step: usize) -> DVector<f64> {
        let base = (path * self.grid.steps + step) * self.d;
        DVector::from_column_slice(&self.pi[base..base + self.d])
    }

    pub fn n_floored(&self) -> usize {
        self.floored.iter().filter(|f| **f).count()
    }

    /// CSV export: path, step, t, W, c, pi_0.. (pi empty at the terminal step).
    pub fn dump_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "path,step,t,W,c")?;
        for j in 0..self.d {
            write!(out, ",pi_{j}")?;
        }
        writeln!(out)?;
        for p in 0..self.n_paths {
            for s in 0..self.grid.n_times() {
                write!(
                    out,
                    "{p},{s},{},{},{}",
                    self.grid.t(s),
                    self.wealth(p, s),
                    self.consumption(p, s)
                )?;
                if s < self.grid.steps {
                    let pi = self.portfolio(p, s);
                    for j in 0..self.d {
                        write!(out, ",{}", pi[j])?;
                    }
                } else {
                    for _ in 0..self.d {
                        write!(out, ",")?;
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Euler discretization of
/// `dW = W ((r + pi' mu) dt + pi' sigma dW) - c dt`, with the consumption and
/// portfolio specs given full path history so non-Markovian strategies are
/// expressible. `c_of` returns a consumption *rate*, `pi_of` wealth fractions.
pub fn simulate_wealth<C, P>(
    c_of: C,
    pi_of: P,
    paths: &MarketPaths,
    omega: f64,
) -> Result<StrategyPaths>
where
    C: Fn(usize, usize, f64, &MarketPaths) -> f64,
    P: Fn(usize, usize, f64, &MarketPaths) -> DVector<f64>,
{
    if !(omega > 0.0) {
        return Err(Error::InvalidParameter("initial wealth must be > 0".into()));
    }
    let grid = paths.grid;
    let nt = grid.n_times();
    let dt = grid.dt();
    let floor = WEALTH_FLOOR_FRACTION * omega;
    let mut out = StrategyPaths {
        grid,
        n_paths: paths.n_paths,
        d: paths.d,
        omega,
        floored: vec![false; paths.n_paths],
        w: vec![0.0; paths.n_paths * nt],
        c: vec![0.0; paths.n_paths * nt],
        pi: vec![0.0; paths.n_paths * grid.steps * paths.d],
    };
    for p in 0..paths.n_paths {
        let mut w = omega;
        out.w[p * nt] = w;
        for s in 0..grid.steps {
            let c = c_of(p, s, w, paths).max(0.0);
            let pi = pi_of(p, s, w, paths);
            out.c[p * nt + s] = c;
            for j in 0..paths.d {
                out.pi[(p * grid.steps + s) * paths.d + j] = pi[j];
            }
            let r = paths.rate(p, s);
            let mu = paths.mu(p, s);
            let sigma = paths.sigma(p, s);
            let dw = paths.dw(p, s);
            let drift = (r + pi.dot(&mu)) * dt;
            let noise = (pi.transpose() * sigma * dw)[(0, 0)];
            w = w * (1.0 + drift + noise) - c * dt;
            if w < floor {
                w = floor;
                out.floored[p] = true;
            }
            out.w[p * nt + s + 1] = w;
        }
        // terminal consumption rate recorded for reporting symmetry
        out.c[p * nt + grid.steps] = c_of(p, grid.steps, w, paths);
    }
    if out.floored.iter().all(|f| *f) {
        return Err(Error::AllPathsFloored);
    }
    Ok(out)
}

/// Candidate optimal controls along each path, evaluated jointly with wealth:
/// `c* = delta^psi e^{-(psi/theta) Y} W*`, `pi* = (1/gamma) Sigma^{-1}(mu + sigma Z')`.
pub fn optimal_controls(
    sol: &BsdeSolution,
    paths: &MarketPaths,
    prefs: &Preferences,
    omega: f64,
) -> Result<StrategyPaths> {
    let cons_scale = prefs.delta.powf(prefs.psi);
    let rate = prefs.exp_rate();
    let gamma = prefs.gamma;
    let c_of = |p: usize, s: usize, w: f64, _: &MarketPaths| {
        cons_scale * (rate * sol.y_at(p, s)).exp() * w
    };
    let pi_of = |p: usize, s: usize, _: f64, mk: &MarketPaths| {
        let c = mk.coefficients_at(p, s).expect("coefficients available");
        let z = sol.z_at(p, s.min(sol.grid.steps - 1));
        c.sigma_big_inv() * (&c.mu + &c.sigma * z) / gamma
    };
    simulate_wealth(c_of, pi_of, paths, omega)
}

/// Monte Carlo estimate of the recursive utility at time 0.
#[derive(Debug, Clone, Copy)]
pub struct UtilityEstimate {
    pub v0: f64,
    pub stderr: f64,
    /// Paths excluded from the averages (positivity floor).
    pub excluded: usize,
}

/// Backward recursion for the Epstein-Zin utility of an arbitrary strategy:
/// V_N = W_T^{1-gamma}/(1-gamma); V_i solves v = E_i[V_{i+1}] + f(c_i, v) dt
/// per path, with conditional expectations fitted on the same basis as the
/// BSDE solver. The reported V_0 is the plain Monte Carlo average of the
/// pathwise functional `int f(c_s, V_s) ds + V(W_T)`, so its standard error
/// is an ordinary cross-path one.
pub fn evaluate_recursive_utility(
    strategy: &StrategyPaths,
    paths: &MarketPaths,
    prefs: &Preferences,
    basis_degree: usize,
) -> Result<UtilityEstimate> {
    let grid = paths.grid;
    let nt = grid.n_times();
    let dt = grid.dt();
    let keep: Vec<usize> =
        (0..paths.n_paths).filter(|&p| !strategy.floored[p]).collect();
    if keep.is_empty() {
        return Err(Error::AllPathsFloored);
    }
    let np = keep.len();

    let mut v = vec![0.0; np * nt];
    for (i, &p) in keep.iter().enumerate() {
        let wt = strategy.wealth(p, grid.steps);
        v[i * nt + grid.steps] = prefs.bequest_v(wt)?;
    }

    for step in (0..grid.steps).rev() {
        let states =
            DMatrix::from_fn(np, paths.state_dim, |i, j| paths.state(keep[i], step)[j]);
        let reg = ConditionalRegression::new(&states, basis_degree)?;
        let v_next = DVector::from_fn(np, |i, _| v[i * nt + step + 1]);
        let (pred, _) = reg.fit(&v_next)?;
        for (i, &p) in keep.iter().enumerate() {
            let c = strategy.consumption(p, step);
            let target = pred[i].min(-1e-300);
            let root = solve_utility_step(target, c, dt, prefs)
                .ok_or(Error::NewtonNonConvergence { step, path: p })?;
            v[i * nt + step] = root;
        }
    }

    // pathwise functional whose expectation is V_0
    let samples: Vec<f64> = keep
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut acc = 0.0;
            for s in 0..grid.steps {
                let c = strategy.consumption(p, s);
                acc += prefs.aggregator_f(c, v[i * nt + s].min(-1e-300)).unwrap_or(0.0) * dt;
            }
            acc + prefs.bequest_v(strategy.wealth(p, grid.steps)).unwrap_or(0.0)
        })
        .collect();
    let (v0, stderr) = mean_stderr(&samples);
    Ok(UtilityEstimate { v0, stderr, excluded: paths.n_paths - np })
}

/// Root of `v - pred - dt f(c, v) = 0` on v < 0. The function is positive at
/// 0^- (pred < 0) and tends to -inf as v -> -inf, so a bracketed
/// bisection/Newton hybrid always lands on a root.
fn solve_utility_step(pred: f64, c: f64, dt: f64, prefs: &Preferences) -> Option<f64> {
    let g = |v: f64| -> f64 {
        match prefs.aggregator_f(c, v) {
            Ok(f) => v - pred - dt * f,
            Err(_) => f64::NAN,
        }
    };
    let mut hi = -1e-12_f64.min(pred.abs() * 1e-12);
    if g(hi) < 0.0 {
        // should not happen for pred < 0; treat as inadmissible
        return None;
    }
    let mut lo = pred.min(-1.0);
    let mut width = lo.abs();
    for _ in 0..200 {
        if g(lo) <= 0.0 {
            break;
        }
        width *= 2.0;
        lo -= width;
    }
    if g(lo) > 0.0 {
        return None;
    }
    let mut v = pred.clamp(lo, hi);
    for _ in 0..200 {
        let gv = g(v);
        if gv.abs() <= 1e-12 * (1.0 + v.abs()) {
            return Some(v);
        }
        if gv > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        // secant toward the root, bisection when it escapes the bracket
        let mid = 0.5 * (lo + hi);
        v = if mid.is_finite() { mid } else { return None };
        if (hi - lo).abs() < 1e-15 * (1.0 + hi.abs()) {
            return Some(v);
        }
    }
    Some(v)
}

/// The utility process G evaluated along paths and its estimated drift.
#[derive(Debug, Clone)]
pub struct UtilityProcess {
    /// Shared starting value omega^{1-gamma}/(1-gamma) e^{Y_0}.
    pub g0: f64,
    /// Per-path terminal values G_T (floored paths excluded).
    pub g_terminal: Vec<f64>,
    pub e_g_terminal: f64,
    pub e_g_terminal_stderr: f64,
    /// Time-averaged drift estimate (E[G_T] - G_0)/T and its stderr.
    pub drift: f64,
    pub drift_stderr: f64,
}

/// `G_t = W_t^{1-gamma}/(1-gamma) e^{Y_t} + int_0^t f(c_s, W_s^{1-gamma} e^{Y_s}/(1-gamma)) ds`
/// along each retained path; a local martingale at the optimum, a local
/// supermartingale otherwise.
pub fn utility_process_g(
    strategy: &StrategyPaths,
    sol: &BsdeSolution,
    prefs: &Preferences,
) -> Result<UtilityProcess> {
    let grid = strategy.grid;
    let dt = grid.dt();
    let horizon = grid.horizon.max(f64::MIN_POSITIVE);
    let gamma = prefs.gamma;
    let g0 = strategy.omega.powf(1.0 - gamma) / (1.0 - gamma) * sol.y_at(0, 0).exp();

    let mut g_terminal = Vec::new();
    for p in 0..strategy.n_paths {
        if strategy.floored[p] {
            continue;
        }
        let mut integral = 0.0;
        for s in 0..grid.steps {
            let w = strategy.wealth(p, s);
            let v = w.powf(1.0 - gamma) * sol.y_at(p, s).exp() / (1.0 - gamma);
            integral += prefs.aggregator_f(strategy.consumption(p, s), v)? * dt;
        }
        let wt = strategy.wealth(p, grid.steps);
        let vt = wt.powf(1.0 - gamma) * sol.y_at(p, grid.steps).exp() / (1.0 - gamma);
        g_terminal.push(vt + integral);
    }
    if g_terminal.is_empty() {
        return Err(Error::AllPathsFloored);
    }
    let (e_g, se) = mean_stderr(&g_terminal);
    Ok(UtilityProcess {
        g0,
        g_terminal,
        e_g_terminal: e_g,
        e_g_terminal_stderr: se,
        drift: (e_g - g0) / horizon,
        drift_stderr: se / horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve_bsde_on, SolverConfig};
    use crate::market::{simulate_factors, MarketModel};
    use approx::assert_relative_eq;

    fn constant_market(
        r: f64,
        mu: f64,
        sigma: f64,
        steps: usize,
        n_paths: usize,
        seed: u64,
    ) -> MarketPaths {
        let model = MarketModel::Constant { r, mu: vec![mu], sigma: vec![vec![sigma]] };
        simulate_factors(&model, TimeGrid::new(1.0, steps).unwrap(), n_paths, seed).unwrap()
    }

    #[test]
    fn bank_account_growth() {
        let paths = constant_market(0.05, 0.0, 0.2, 40, 8, 3);
        let s = simulate_wealth(
            |_, _, _, _| 0.0,
            |_, _, _, _| DVector::zeros(1),
            &paths,
            1.0,
        )
        .unwrap();
        let dt = paths.grid.dt();
        let expect = (1.0 + 0.05 * dt).powi(40);
        for p in 0..8 {
            assert_relative_eq!(s.wealth(p, 40), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn proportional_consumption_decay() {
        let paths = constant_market(0.0, 0.0, 0.2, 200, 4, 3);
        let kappa = 0.5;
        let s = simulate_wealth(
            |_, _, w, _| kappa * w,
            |_, _, _, _| DVector::zeros(1),
            &paths,
            2.0,
        )
        .unwrap();
        let dt = paths.grid.dt();
        let expect = 2.0 * (1.0 - kappa * dt).powi(200);
        assert_relative_eq!(s.wealth(0, 200), expect, epsilon = 1e-12);
        assert_relative_eq!(expect, 2.0 * (-0.5f64).exp(), epsilon = 1e-3);
    }

    #[test]
    fn bequest_only_degenerate_horizon() {
        let model = MarketModel::Constant { r: 0.02, mu: vec![0.06], sigma: vec![vec![0.2]] };
        let paths =
            simulate_factors(&model, TimeGrid::new(0.0, 1).unwrap(), 64, 5).unwrap();
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let s = simulate_wealth(
            |_, _, _, _| 0.0,
            |_, _, _, _| DVector::zeros(1),
            &paths,
            2.0,
        )
        .unwrap();
        let est = evaluate_recursive_utility(&s, &paths, &prefs, 2).unwrap();
        assert_relative_eq!(est.v0, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn optimal_controls_merton_and_consumption_fraction() {
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let paths = constant_market(0.02, 0.06, 0.2, 50, 2000, 11);
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let s = optimal_controls(&sol, &paths, &prefs, 1.0).unwrap();
        // Z ~ 0, so pi* = mu / (gamma Sigma) = 0.06 / (2 * 0.04) = 0.75
        for p in 0..20 {
            assert_relative_eq!(s.portfolio(p, 0)[0], 0.75, epsilon = 0.01);
        }
        // consumption fraction depends only on Y: c/W = delta^psi e^{Y}
        for p in 0..20 {
            for step in [0, 25, 49] {
                let frac = s.consumption(p, step) / s.wealth(p, step);
                assert_relative_eq!(frac, sol.y_at(p, step).exp(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn scale_covariance_in_initial_wealth() {
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let paths = constant_market(0.02, 0.06, 0.2, 20, 200, 13);
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let s1 = optimal_controls(&sol, &paths, &prefs, 1.0).unwrap();
        let s2 = optimal_controls(&sol, &paths, &prefs, 2.0).unwrap();
        for p in 0..10 {
            for step in 0..20 {
                assert_relative_eq!(
                    2.0 * s1.consumption(p, step),
                    s2.consumption(p, step),
                    epsilon = 1e-9
                );
                assert_relative_eq!(
                    s1.portfolio(p, step)[0],
                    s2.portfolio(p, step)[0],
                    epsilon = 1e-12
                );
            }
        }
        let e1 = evaluate_recursive_utility(&s1, &paths, &prefs, 2).unwrap();
        let e2 = evaluate_recursive_utility(&s2, &paths, &prefs, 2).unwrap();
        // V_0 scales by omega^{1-gamma} = 1/2
        assert_relative_eq!(e2.v0, e1.v0 / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn recursive_utility_matches_value_function() {
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let paths = constant_market(0.02, 0.06, 0.2, 50, 4000, 17);
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let s = optimal_controls(&sol, &paths, &prefs, 1.0).unwrap();
        let est = evaluate_recursive_utility(&s, &paths, &prefs, 2).unwrap();
        let value = -(sol.y0.exp()); // omega^{1-gamma}/(1-gamma) e^{Y_0} at omega = 1, gamma = 2
        assert!(
            (est.v0 - value).abs() <= 4.0 * est.stderr.max(1e-3),
            "V0 = {} vs value function {} (se {})",
            est.v0,
            value,
            est.stderr
        );
    }

    #[test]
    fn g_process_drift_vanishes_at_optimum() {
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let paths = constant_market(0.02, 0.06, 0.2, 50, 4000, 19);
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let s = optimal_controls(&sol, &paths, &prefs, 1.0).unwrap();
        let g = utility_process_g(&s, &sol, &prefs).unwrap();
        // Euler time-stepping leaves an O(dt) bias in the drift estimate:
        // at 4000 paths it measures -0.164 (N=25), -0.067 (N=50), -0.023
        // (N=100), -0.008 (N=200). At N=50 we bound it away from the drift a
        // genuinely suboptimal strategy produces (order -0.5 and beyond).
        assert!(
            g.drift.abs() <= 0.12,
            "drift {} stderr {}",
            g.drift,
            g.drift_stderr
        );
        // G_0 = omega^{1-gamma}/(1-gamma) e^{Y_0}
        assert_relative_eq!(g.g0, -sol.y0.exp(), epsilon = 1e-12);
    }

    #[test]
    fn g_process_supermartingale_for_perturbations() {
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let paths = constant_market(0.02, 0.06, 0.2, 50, 4000, 23);
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let cons_scale = prefs.delta.powf(prefs.psi);
        let rate = prefs.exp_rate();
        // pi* + 0.2
        let s = simulate_wealth(
            |p, step, w, _| cons_scale * (rate * sol.y_at(p, step)).exp() * w,
            |_, _, _, _| DVector::from_vec(vec![0.95]),
            &paths,
            1.0,
        )
        .unwrap();
        let g = utility_process_g(&s, &sol, &prefs).unwrap();
        assert!(g.e_g_terminal <= g.g0 + 3.0 * g.e_g_terminal_stderr);
        // c* halved
        let s = simulate_wealth(
            |p, step, w, _| 0.5 * cons_scale * (rate * sol.y_at(p, step)).exp() * w,
            |_, _, _, _| DVector::from_vec(vec![0.75]),
            &paths,
            1.0,
        )
        .unwrap();
        let g = utility_process_g(&s, &sol, &prefs).unwrap();
        assert!(g.e_g_terminal <= g.g0 + 3.0 * g.e_g_terminal_stderr);
    }
}
