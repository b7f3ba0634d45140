//! State price densities and the convex-dual side of the optimization: the
//! minimal density, the optimizing density built from the BSDE solution, the
//! dual value and multiplier, Monte Carlo evaluation of the dual utility
//! recursion, and the dual counterpart R of the utility process G.

use nalgebra::{DMatrix, DVector};
use std::io::Write;

use crate::bsde::BsdeSolution;
use crate::error::{Error, Result};
use crate::market::{MarketPaths, TimeGrid};
use crate::preferences::Preferences;
use crate::regression::{mean_stderr, ConditionalRegression};
use crate::strategy::UtilityEstimate;

/// A state price density `dD = D(-r dt + xi dW)` along simulated paths,
/// stored in log space.
#[derive(Debug, Clone)]
pub struct DualPaths {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub n: usize,
    log_d: Vec<f64>,
    xi: Vec<f64>,
}

impl DualPaths {
    pub fn density(&self, path: usize, step: usize) -> f64 {
        self.log_d[path * self.grid.n_times() + step].exp()
    }

    pub fn log_density(&self, path: usize, step: usize) -> f64 {
        self.log_d[path * self.grid.n_times() + step]
    }

    pub fn xi(&self, path: usize, step: usize) -> DVector<f64> {
        let base = (path * self.grid.steps + step) * self.n;
        DVector::from_column_slice(&self.xi[base..base + self.n])
    }

    /// CSV export: path, step, t, D, xi_0.. (xi empty at the terminal step).
    pub fn dump_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "path,step,t,D")?;
        for j in 0..self.n {
            write!(out, ",xi_{j}")?;
        }
        writeln!(out)?;
        for p in 0..self.n_paths {
            for s in 0..self.grid.n_times() {
                write!(out, "{p},{s},{},{}", self.grid.t(s), self.density(p, s))?;
                if s < self.grid.steps {
                    let xi = self.xi(p, s);
                    for j in 0..self.n {
                        write!(out, ",{}", xi[j])?;
                    }
                } else {
                    for _ in 0..self.n {
                        write!(out, ",")?;
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Builds `D_t = exp(-int r) E(int xi dW)_t` for a caller-supplied volatility
/// `xi`, integrated in log space:
/// `d log D = (-r - |xi|^2/2) dt + xi . dW`.
pub fn density_from_xi<F>(paths: &MarketPaths, xi_of: F) -> DualPaths
where
    F: Fn(usize, usize, &MarketPaths) -> DVector<f64>,
{
    let grid = paths.grid;
    let nt = grid.n_times();
    let dt = grid.dt();
    let mut out = DualPaths {
        grid,
        n_paths: paths.n_paths,
        n: paths.n,
        log_d: vec![0.0; paths.n_paths * nt],
        xi: vec![0.0; paths.n_paths * grid.steps * paths.n],
    };
    for p in 0..paths.n_paths {
        let mut log_d = 0.0;
        for s in 0..grid.steps {
            let xi = xi_of(p, s, paths);
            for j in 0..paths.n {
                out.xi[(p * grid.steps + s) * paths.n + j] = xi[j];
            }
            log_d += (-paths.rate(p, s) - 0.5 * xi.norm_squared()) * dt
                + xi.dot(&paths.dw(p, s));
            out.log_d[p * nt + s + 1] = log_d;
        }
    }
    out
}

/// The minimal state price density, with `xi^0 = -mu' Sigma^{-1} sigma`.
pub fn minimal_density(paths: &MarketPaths) -> Result<DualPaths> {
    let mut rows = Vec::with_capacity(paths.n_paths * paths.grid.steps);
    for p in 0..paths.n_paths {
        for s in 0..paths.grid.steps {
            rows.push(-paths.coefficients_at(p, s)?.mu_sig_row());
        }
    }
    Ok(density_from_xi(paths, |p, s, _| rows[p * paths.grid.steps + s].clone()))
}

/// The density attaining the dual minimum,
/// `xi* = Z - mu' Sigma^{-1} sigma - Z sigma' Sigma^{-1} sigma`
/// (row convention; stored as a column n-vector).
pub fn optimal_density(paths: &MarketPaths, sol: &BsdeSolution) -> Result<DualPaths> {
    let mut rows = Vec::with_capacity(paths.n_paths * paths.grid.steps);
    for p in 0..paths.n_paths {
        for s in 0..paths.grid.steps {
            let c = paths.coefficients_at(p, s)?;
            let z = sol.z_at(p, s);
            rows.push(&z - c.mu_sig_row() - c.projection() * &z);
        }
    }
    Ok(density_from_xi(paths, |p, s, _| rows[p * paths.grid.steps + s].clone()))
}

/// Candidate dual multiplier `y* = omega^{-gamma} e^{Y_0}`.
pub fn multiplier_y_star(omega: f64, y0: f64, prefs: &Preferences) -> f64 {
    omega.powf(-prefs.gamma) * y0.exp()
}

/// Closed form of the dual value at the optimizing density:
/// `U_0 = gamma/(1-gamma) y^{(gamma-1)/gamma} e^{Y_0/gamma}`.
pub fn dual_value(y: f64, y0: f64, prefs: &Preferences) -> f64 {
    let g = prefs.gamma;
    g / (1.0 - g) * y.powf((g - 1.0) / g) * (y0 / g).exp()
}

/// Headline duality quantities for a solved problem.
#[derive(Debug, Clone, Copy)]
pub struct DualityGap {
    pub y_star: f64,
    /// Dual value U_0 at (y*, D*).
    pub u0: f64,
    /// Primal value from the BSDE: omega^{1-gamma}/(1-gamma) e^{Y_0}.
    pub v0_formula: f64,
    /// |U_0 + omega y* - v0_formula|; an algebraic identity, so ~1e-16.
    pub algebraic_gap: f64,
    /// |V_0 (Monte Carlo) - (U_0 + omega y*)|.
    pub mc_gap: f64,
    /// Combined standard error for `mc_gap`: the primal estimate's stderr
    /// plus |V_0| times the Y_0 stderr (U_0 + omega y* has derivative V_0
    /// in Y_0).
    pub mc_gap_stderr: f64,
}

pub fn duality_gap(
    sol: &BsdeSolution,
    primal: &UtilityEstimate,
    prefs: &Preferences,
    omega: f64,
) -> DualityGap {
    let y_star = multiplier_y_star(omega, sol.y0, prefs);
    let u0 = dual_value(y_star, sol.y0, prefs);
    let v0_formula = omega.powf(1.0 - prefs.gamma) / (1.0 - prefs.gamma) * sol.y0.exp();
    let dual_total = u0 + omega * y_star;
    let y0_se = if sol.y0_stderr.is_finite() { sol.y0_stderr } else { 0.0 };
    DualityGap {
        y_star,
        u0,
        v0_formula,
        algebraic_gap: (dual_total - v0_formula).abs(),
        mc_gap: (primal.v0 - dual_total).abs(),
        mc_gap_stderr: primal.stderr + v0_formula.abs() * y0_se,
    }
}

/// Monte Carlo estimate of the dual utility `U_0^{yD}` by backward recursion
/// `U_i = E_i[U_{i+1}] + g(y D_i, U_i / gamma) dt`, `U_N = U(y D_T)`, fitted
/// on the same regression basis as the primal solver. The reported value is
/// the plain average of the pathwise functional
/// `int g(y D_s, U_s/gamma) ds + U(y D_T)`.
pub fn evaluate_dual_utility(
    dual: &DualPaths,
    y: f64,
    paths: &MarketPaths,
    prefs: &Preferences,
    basis_degree: usize,
) -> Result<UtilityEstimate> {
    if !(y > 0.0) {
        return Err(Error::InvalidParameter("dual multiplier must be > 0".into()));
    }
    let grid = dual.grid;
    let nt = grid.n_times();
    let dt = grid.dt();
    let np = dual.n_paths;

    let mut u = vec![0.0; np * nt];
    for p in 0..np {
        u[p * nt + grid.steps] = prefs.dual_terminal_u(y * dual.density(p, grid.steps))?;
    }
    for step in (0..grid.steps).rev() {
        let states = DMatrix::from_fn(np, paths.state_dim, |p, j| paths.state(p, step)[j]);
        let reg = ConditionalRegression::new(&states, basis_degree)?;
        let u_next = DVector::from_fn(np, |p, _| u[p * nt + step + 1]);
        let (pred, _) = reg.fit(&u_next)?;
        for p in 0..np {
            let d = y * dual.density(p, step);
            let target = pred[p].min(-1e-300);
            u[p * nt + step] = solve_dual_step(target, d, dt, prefs)
                .ok_or(Error::NewtonNonConvergence { step, path: p })?;
        }
    }

    let samples: Vec<f64> = (0..np)
        .map(|p| {
            let mut acc = 0.0;
            for s in 0..grid.steps {
                let d = y * dual.density(p, s);
                acc += prefs
                    .dual_aggregator_g(d, u[p * nt + s].min(-1e-300) / prefs.gamma)
                    .unwrap_or(0.0)
                    * dt;
            }
            acc + prefs
                .dual_terminal_u(y * dual.density(p, grid.steps))
                .unwrap_or(0.0)
        })
        .collect();
    let (v0, stderr) = mean_stderr(&samples);
    Ok(UtilityEstimate { v0, stderr, excluded: 0 })
}

/// Root of `u - pred - dt g(d, u/gamma) = 0` on u < 0. The left side is
/// positive at 0^- (g -> 0 there and pred < 0) and tends to -inf as
/// u -> -inf because the power term of g grows superlinearly, so a bracketed
/// bisection always converges.
fn solve_dual_step(pred: f64, d: f64, dt: f64, prefs: &Preferences) -> Option<f64> {
    let g = |u: f64| -> f64 {
        match prefs.dual_aggregator_g(d, u / prefs.gamma) {
            Ok(val) => u - pred - dt * val,
            Err(_) => f64::NAN,
        }
    };
    let mut hi = -1e-12_f64.min(pred.abs() * 1e-12);
    if g(hi) < 0.0 {
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
    let mut u = pred.clamp(lo, hi);
    for _ in 0..200 {
        let gu = g(u);
        if gu.abs() <= 1e-12 * (1.0 + u.abs()) {
            return Some(u);
        }
        if gu > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        u = 0.5 * (lo + hi);
        if (hi - lo).abs() < 1e-15 * (1.0 + hi.abs()) {
            return Some(u);
        }
    }
    Some(u)
}

/// The dual counterpart of the utility process G:
/// `R_t = gamma (yD_t)^{(gamma-1)/gamma}/(1-gamma) e^{Y_t/gamma}
///        + int_0^t g(yD_s, (yD_s)^{(gamma-1)/gamma}/(1-gamma) e^{Y_s/gamma}) ds`,
/// a local submartingale for every admissible density and a local martingale
/// at the optimizing one.
#[derive(Debug, Clone)]
pub struct DualProcess {
    pub r0: f64,
    pub e_r_terminal: f64,
    pub e_r_terminal_stderr: f64,
    /// (E[R_T] - R_0)/T and its stderr; >= 0 in expectation, 0 at D*.
    pub drift: f64,
    pub drift_stderr: f64,
}

pub fn dual_process_r(
    dual: &DualPaths,
    sol: &BsdeSolution,
    y: f64,
    prefs: &Preferences,
) -> Result<DualProcess> {
    let grid = dual.grid;
    let dt = grid.dt();
    let horizon = grid.horizon.max(f64::MIN_POSITIVE);
    let g = prefs.gamma;
    let pow = (g - 1.0) / g;
    let r0 = g / (1.0 - g) * y.powf(pow) * (sol.y_at(0, 0) / g).exp();

    let mut terminal = Vec::with_capacity(dual.n_paths);
    for p in 0..dual.n_paths {
        let mut integral = 0.0;
        for s in 0..grid.steps {
            let d = y * dual.density(p, s);
            let u = d.powf(pow) / (1.0 - g) * (sol.y_at(p, s) / g).exp();
            integral += prefs.dual_aggregator_g(d, u)? * dt;
        }
        let d_t = y * dual.density(p, grid.steps);
        let head = g / (1.0 - g) * d_t.powf(pow) * (sol.y_at(p, grid.steps) / g).exp();
        terminal.push(head + integral);
    }
    let (e_r, se) = mean_stderr(&terminal);
    Ok(DualProcess {
        r0,
        e_r_terminal: e_r,
        e_r_terminal_stderr: se,
        drift: (e_r - r0) / horizon,
        drift_stderr: se / horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve_bsde_on, SolverConfig};
    use crate::market::{simulate_factors, MarketModel};
    use approx::assert_relative_eq;

    fn constant_paths(r: f64, mu: f64, sigma: f64, n_paths: usize, seed: u64) -> MarketPaths {
        let model = MarketModel::Constant { r, mu: vec![mu], sigma: vec![vec![sigma]] };
        simulate_factors(&model, TimeGrid::new(1.0, 50).unwrap(), n_paths, seed).unwrap()
    }

    #[test]
    fn minimal_density_is_one_without_rates_or_premia() {
        let paths = constant_paths(0.0, 0.0, 0.2, 16, 7);
        let d0 = minimal_density(&paths).unwrap();
        for p in 0..16 {
            for s in 0..=50 {
                assert_relative_eq!(d0.density(p, s), 1.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn discounted_minimal_density_is_mean_one() {
        let paths = constant_paths(0.02, 0.06, 0.2, 8000, 29);
        let d0 = minimal_density(&paths).unwrap();
        // E[D^0_T e^{int r}] = E[E(-int mpr dW)_T] = 1
        let vals: Vec<f64> =
            (0..8000).map(|p| d0.density(p, 50) * (0.02f64).exp()).collect();
        let (m, se) = mean_stderr(&vals);
        assert!((m - 1.0).abs() <= 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn complete_market_optimal_density_collapses_to_minimal() {
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let paths = constant_paths(0.02, 0.06, 0.2, 500, 31);
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let d0 = minimal_density(&paths).unwrap();
        let ds = optimal_density(&paths, &sol).unwrap();
        // d = n: sigma' Sigma^{-1} sigma = I, so xi* = -mu' Sigma^{-1} sigma
        for p in 0..20 {
            for s in 0..50 {
                assert_relative_eq!(ds.xi(p, s)[0], d0.xi(p, s)[0], epsilon = 1e-10);
                assert_relative_eq!(
                    ds.log_density(p, s),
                    d0.log_density(p, s),
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn optimal_density_kills_asset_drift() {
        let model = MarketModel::Heston {
            b: 1.0,
            l: 0.25,
            a: 0.5,
            lambda: 0.5,
            sigma: 1.0,
            rho: -0.5,
            x0: 0.25,
            rate: 0.02,
        };
        let prefs = Preferences::new(2.0, 2.0, 0.05).unwrap();
        let paths =
            simulate_factors(&model, TimeGrid::new(1.0, 20).unwrap(), 400, 37).unwrap();
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let ds = optimal_density(&paths, &sol).unwrap();
        // mu + sigma xi*' = 0 makes D* a state price density
        for p in 0..50 {
            for s in [0, 10, 19] {
                let c = paths.coefficients_at(p, s).unwrap();
                let lhs = &c.mu + &c.sigma * ds.xi(p, s);
                assert!(lhs.norm() <= 1e-10 * (1.0 + c.mu.norm()), "residual {}", lhs.norm());
            }
        }
    }

    #[test]
    fn dual_plus_endowment_equals_primal_value() {
        for (gamma, psi, delta, omega, y0) in [
            (2.0, 2.0, 1.0, 1.0, 0.54),
            (3.0, 1.25, 0.1, 2.5, -0.8),
            (1.5, 4.0, 0.05, 0.3, 1.2),
        ] {
            let prefs = Preferences::new(gamma, psi, delta).unwrap();
            let ys = multiplier_y_star(omega, y0, &prefs);
            let u0 = dual_value(ys, y0, &prefs);
            let v0 = omega.powf(1.0 - gamma) / (1.0 - gamma) * y0.exp();
            assert_relative_eq!(u0 + omega * ys, v0, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn multiplier_minimizes_dual_over_y() {
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let (omega, y0) = (1.7, 0.54);
        let ys = multiplier_y_star(omega, y0, &prefs);
        let at = |y: f64| dual_value(y, y0, &prefs) + omega * y;
        let best = at(ys);
        for k in -10..=10 {
            let y = ys * (0.3 * k as f64).exp();
            assert!(at(y) >= best - 1e-12, "y={y} gives {} < {best}", at(y));
        }
    }

    #[test]
    fn dual_recursion_matches_closed_form() {
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let paths = constant_paths(0.02, 0.06, 0.2, 4000, 41);
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let ds = optimal_density(&paths, &sol).unwrap();
        let ys = multiplier_y_star(1.0, sol.y0, &prefs);
        let est = evaluate_dual_utility(&ds, ys, &paths, &prefs, 2).unwrap();
        let u0 = dual_value(ys, sol.y0, &prefs);
        assert!(
            (est.v0 - u0).abs() <= 4.0 * est.stderr.max(1e-2),
            "MC {} vs formula {} (se {})",
            est.v0,
            u0,
            est.stderr
        );
    }

    #[test]
    fn weak_duality_for_perturbed_densities() {
        let model = MarketModel::Heston {
            b: 1.0,
            l: 0.25,
            a: 0.5,
            lambda: 0.5,
            sigma: 1.0,
            rho: -0.5,
            x0: 0.25,
            rate: 0.02,
        };
        let prefs = Preferences::new(2.0, 2.0, 0.05).unwrap();
        let paths =
            simulate_factors(&model, TimeGrid::new(1.0, 25).unwrap(), 2000, 43).unwrap();
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let ds = optimal_density(&paths, &sol).unwrap();
        let omega = 1.0;
        let ys = multiplier_y_star(omega, sol.y0, &prefs);
        let v0 = omega.powf(1.0 - prefs.gamma) / (1.0 - prefs.gamma) * sol.y0.exp();

        // perturb along the kernel of sigma (still a state price density) and
        // in the multiplier
        let rho: f64 = -0.5;
        let kernel = DVector::from_vec(vec![(1.0 - rho * rho).sqrt(), -rho]);
        for (eps, y_scale) in
            [(0.3, 1.0), (-0.4, 1.0), (0.8, 1.0), (0.0, 0.5), (0.0, 2.0), (0.5, 1.4)]
        {
            let d = density_from_xi(&paths, |p, s, _| ds.xi(p, s) + eps * &kernel);
            let est =
                evaluate_dual_utility(&d, ys * y_scale, &paths, &prefs, 2).unwrap();
            let total = est.v0 + omega * ys * y_scale;
            assert!(
                total >= v0 - 3.0 * est.stderr - 0.02,
                "eps {eps}, y_scale {y_scale}: dual {total} < primal {v0}"
            );
        }
    }

    #[test]
    fn dual_process_martingale_at_optimum_submartingale_otherwise() {
        let prefs = Preferences::new(2.0, 2.0, 1.0).unwrap();
        let paths = constant_paths(0.02, 0.06, 0.2, 4000, 47);
        let cfg = SolverConfig { basis_degree: 2, stderr_batches: 0, ..Default::default() };
        let sol = solve_bsde_on(&paths, &prefs, &cfg).unwrap();
        let ds = optimal_density(&paths, &sol).unwrap();
        let ys = multiplier_y_star(1.0, sol.y0, &prefs);
        let r = dual_process_r(&ds, &sol, ys, &prefs).unwrap();
        assert!(
            r.drift.abs() <= 3.0 * r.drift_stderr + 0.05,
            "drift {} se {}",
            r.drift,
            r.drift_stderr
        );
        assert_relative_eq!(r.r0, dual_value(ys, sol.y0, &prefs), epsilon = 1e-12);

        // a wrong density (extra volatility that is not a price of risk)
        let bad = density_from_xi(&paths, |p, s, _| {
            ds.xi(p, s) + DVector::from_vec(vec![0.8])
        });
        let rb = dual_process_r(&bad, &sol, ys, &prefs).unwrap();
        assert!(rb.drift >= -3.0 * rb.drift_stderr, "drift {}", rb.drift);
    }
}
