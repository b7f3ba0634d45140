//! Factor-model definitions and path simulation.
//!
//! A `MarketModel` describes the joint dynamics of the risk-free rate `r`,
//! the excess return `mu` (d-vector) and the volatility `sigma` (d x n
//! matrix) driven by an n-dimensional Brownian motion, with `d <= n` so the
//! market may be incomplete. Square-root factors (Heston variance, CIR rate)
//! are discretized with a full-truncation Euler scheme: the factor is
//! replaced by its positive part inside both drift and diffusion, which
//! keeps the coefficient processes nonnegative without exact-scheme
//! machinery.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};

/// Coefficients above this magnitude raise the paths' overflow flag.
pub const COEFF_OVERFLOW_CAP: f64 = 1e9;

/// Lower clamp for a variance factor feeding a volatility row, preventing a
/// degenerate covariance when a square-root path touches zero.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Uniform time grid t_0 = 0 < ... < t_N = T.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Horizon T in years, > 0 (0 is allowed as the degenerate single-point grid).
    pub horizon: f64,
    /// Number of steps N >= 1.
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if horizon < 0.0 || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be >= 0, got {horizon}")));
        }
        if steps < 1 {
            return Err(Error::InvalidParameter("steps must be >= 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        self.dt() * i as f64
    }

    /// Number of grid points, steps + 1.
    pub fn n_times(&self) -> usize {
        self.steps + 1
    }
}

/// Bounded adapted short-rate specification for the factor models.
///
/// The stochastic-volatility examples leave the rate as an arbitrary bounded
/// adapted process; `Constant` is the default and `PathDependentRate` below
/// supplies a genuinely non-Markovian bounded one.
pub type RateSpec = f64;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum MarketModel {
    /// Constant coefficients; arbitrary d <= n.
    Constant { r: f64, mu: Vec<f64>, sigma: Vec<Vec<f64>> },
    /// Stochastic volatility: dX = b(l - X) dt + a sqrt(X) dW^1,
    /// risky volatility sqrt(X) sigma with correlation rho, excess return
    /// mu(X) = lambda X; d = 1, n = 2.
    Heston { b: f64, l: f64, a: f64, lambda: f64, sigma: f64, rho: f64, x0: f64, rate: RateSpec },
    /// Ornstein-Uhlenbeck factor: dX = -b X dt + a dW^1, constant volatility
    /// sigma with correlation rho, excess return mu(X) = sigma (lambda0 + lambda1 X).
    LinearDiffusion {
        b: f64,
        a: f64,
        sigma: f64,
        lambda0: f64,
        lambda1: f64,
        rho: f64,
        x0: f64,
        rate: RateSpec,
    },
    /// Square-root short rate: dr = (b - l r) dt + a sqrt(r) dW^1 with bounded
    /// excess return `mu` and constant volatility sigma in [eps, 1/eps].
    Cir { b: f64, l: f64, a: f64, r0: f64, mu: f64, sigma: f64, eps: f64, rho: f64 },
    /// Wraps a base model and replaces its rate by a clamped running average
    /// of the factor path, r_t = clamp(k0 + k1 * (1/t) int_0^t X ds, r_min, r_max).
    /// The rate depends on the whole factor history, so the model is
    /// non-Markovian in (X, r).
    PathDependentRate {
        base: Box<MarketModel>,
        kappa0: f64,
        kappa1: f64,
        r_min: f64,
        r_max: f64,
    },
}

impl MarketModel {
    /// (d, n): number of risky assets and Brownian dimension.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            MarketModel::Constant { mu, sigma, .. } => {
                (mu.len(), sigma.first().map_or(0, |row| row.len()))
            }
            MarketModel::Heston { .. }
            | MarketModel::LinearDiffusion { .. }
            | MarketModel::Cir { .. } => (1, 2),
            MarketModel::PathDependentRate { base, .. } => base.dims(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MarketModel::Constant { mu, sigma, .. } => {
                let d = mu.len();
                if d == 0 {
                    return Err(Error::InvalidParameter("mu must be nonempty".into()));
                }
                if sigma.len() != d {
                    return Err(Error::InvalidParameter("sigma must have d rows".into()));
                }
                let n = sigma[0].len();
                if sigma.iter().any(|row| row.len() != n) {
                    return Err(Error::InvalidParameter("sigma rows must have equal length".into()));
                }
                if d > n {
                    return Err(Error::InvalidParameter(format!("d = {d} must be <= n = {n}")));
                }
                Ok(())
            }
            MarketModel::Heston { b, l, a, lambda, sigma, rho, x0, .. } => {
                for (name, v) in [("b", b), ("l", l), ("a", a), ("lambda", lambda), ("sigma", sigma)]
                {
                    if !(*v >= 0.0) {
                        return Err(Error::InvalidParameter(format!("{name} must be >= 0")));
                    }
                }
                if *sigma <= 0.0 {
                    return Err(Error::InvalidParameter("sigma must be > 0".into()));
                }
                if !(*x0 >= 0.0) {
                    return Err(Error::InvalidParameter("x0 must be >= 0".into()));
                }
                check_rho(*rho)
            }
            MarketModel::LinearDiffusion { b, a, sigma, lambda0, lambda1, rho, .. } => {
                for (name, v) in
                    [("b", b), ("a", a), ("lambda0", lambda0), ("lambda1", lambda1)]
                {
                    if !(*v >= 0.0) {
                        return Err(Error::InvalidParameter(format!("{name} must be >= 0")));
                    }
                }
                if *sigma <= 0.0 {
                    return Err(Error::InvalidParameter("sigma must be > 0".into()));
                }
                check_rho(*rho)
            }
            MarketModel::Cir { b, l, a, r0, sigma, eps, rho, .. } => {
                for (name, v) in [("b", b), ("l", l), ("a", a)] {
                    if !(*v >= 0.0) {
                        return Err(Error::InvalidParameter(format!("{name} must be >= 0")));
                    }
                }
                if !(*eps > 0.0 && *eps < 1.0) {
                    return Err(Error::InvalidParameter("eps must lie in (0, 1)".into()));
                }
                if !(*sigma >= *eps && *sigma <= 1.0 / *eps) {
                    return Err(Error::InvalidParameter("sigma must lie in [eps, 1/eps]".into()));
                }
                if !(*r0 >= 0.0) {
                    return Err(Error::InvalidParameter("r0 must be >= 0".into()));
                }
                check_rho(*rho)
            }
            MarketModel::PathDependentRate { base, r_min, r_max, .. } => {
                if r_min > r_max {
                    return Err(Error::InvalidParameter("r_min must be <= r_max".into()));
                }
                base.validate()
            }
        }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!("rho must lie in [-1, 1], got {rho}")));
    }
    Ok(())
}

/// Model coefficients at one (path, step), with the covariance inverse
/// precomputed once per lookup.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub r: f64,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Sigma = sigma sigma', d x d.
    pub sigma_big: DMatrix<f64>,
    sigma_big_inv: DMatrix<f64>,
}

impl Coefficients {
    pub fn new(r: f64, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let sigma_big = &sigma * sigma.transpose();
        let sigma_big_inv = sigma_big
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("Sigma = sigma sigma' is numerically singular".into()))?;
        if !sigma_big_inv.iter().all(|v| v.is_finite()) {
            return Err(Error::Singular("Sigma inverse is not finite".into()));
        }
        Ok(Self { r, mu, sigma, sigma_big, sigma_big_inv })
    }

    pub fn sigma_big_inv(&self) -> &DMatrix<f64> {
        &self.sigma_big_inv
    }

    /// Squared market price of risk, mu' Sigma^{-1} mu.
    pub fn mpr_sq(&self) -> f64 {
        (self.mu.transpose() * &self.sigma_big_inv * &self.mu)[(0, 0)]
    }

    /// mu' Sigma^{-1} sigma as an n-vector.
    pub fn mu_sig_row(&self) -> DVector<f64> {
        (self.mu.transpose() * &self.sigma_big_inv * &self.sigma).transpose()
    }

    /// sigma' Sigma^{-1} sigma, the n x n orthogonal projection onto the row
    /// space of sigma.
    pub fn projection(&self) -> DMatrix<f64> {
        self.sigma.transpose() * &self.sigma_big_inv * &self.sigma
    }
}

/// Eigenvalues of sigma' Sigma^{-1} sigma, sorted ascending. Each is 0 or 1
/// up to rounding, with exactly d ones.
pub fn projection_eigencheck(sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let sigma_big = sigma * sigma.transpose();
    let inv = sigma_big
        .try_inverse()
        .ok_or_else(|| Error::Singular("Sigma = sigma sigma' is numerically singular".into()))?;
    let proj = sigma.transpose() * inv * sigma;
    // symmetrize before the eigensolve to kill rounding asymmetry
    let sym = (&proj + proj.transpose()) * 0.5;
    let mut eig: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(eig)
}

/// Simulated market paths: factor, coefficient processes and Brownian
/// increments, flat row-major storage. Immutable after construction.
#[derive(Debug, Clone)]
pub struct MarketPaths {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    /// Raised when any stored coefficient exceeds `COEFF_OVERFLOW_CAP`.
    pub overflow: bool,
    /// Number of Markov state variables a conditional-expectation regression
    /// should condition on: 0 for constant coefficients, 1 for the factor,
    /// 2 when the rate depends on the factor's running average.
    pub state_dim: usize,
    x: Vec<f64>,
    run_avg_x: Vec<f64>,
    r: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    dw: Vec<f64>,
}

impl MarketPaths {
    #[inline]
    fn ts_idx(&self, path: usize, step: usize) -> usize {
        path * self.grid.n_times() + step
    }

    pub fn factor(&self, path: usize, step: usize) -> f64 {
        self.x[self.ts_idx(path, step)]
    }

    /// Running average (1/t) int_0^t X ds (left rectangles); X_0 at t = 0.
    pub fn factor_running_avg(&self, path: usize, step: usize) -> f64 {
        self.run_avg_x[self.ts_idx(path, step)]
    }

    pub fn rate(&self, path: usize, step: usize) -> f64 {
        self.r[self.ts_idx(path, step)]
    }

    pub fn mu(&self, path: usize, step: usize) -> DVector<f64> {
        let base = self.ts_idx(path, step) * self.d;
        DVector::from_column_slice(&self.mu[base..base + self.d])
    }

    pub fn sigma(&self, path: usize, step: usize) -> DMatrix<f64> {
        let base = self.ts_idx(path, step) * self.d * self.n;
        DMatrix::from_row_slice(self.d, self.n, &self.sigma[base..base + self.d * self.n])
    }

    /// Brownian increment over [t_step, t_{step+1}], n-vector.
    pub fn dw(&self, path: usize, step: usize) -> DVector<f64> {
        let base = (path * self.grid.steps + step) * self.n;
        DVector::from_column_slice(&self.dw[base..base + self.n])
    }

    /// Full coefficient tuple with Sigma inverted; errors on degenerate Sigma.
    pub fn coefficients_at(&self, path: usize, step: usize) -> Result<Coefficients> {
        Coefficients::new(self.rate(path, step), self.mu(path, step), self.sigma(path, step))
    }

    /// Regression state at (path, step); length `state_dim`.
    pub fn state(&self, path: usize, step: usize) -> Vec<f64> {
        match self.state_dim {
            0 => vec![],
            1 => vec![self.factor(path, step)],
            _ => vec![self.factor(path, step), self.factor_running_avg(path, step)],
        }
    }

    /// A copy restricted to the paths in `range` (used for batch error bars).
    pub fn subset(&self, range: std::ops::Range<usize>) -> MarketPaths {
        let nt = self.grid.n_times();
        let ns = self.grid.steps;
        let take = |v: &Vec<f64>, stride: usize| {
            v[range.start * stride..range.end * stride].to_vec()
        };
        MarketPaths {
            grid: self.grid,
            n_paths: range.len(),
            d: self.d,
            n: self.n,
            seed: self.seed,
            overflow: self.overflow,
            state_dim: self.state_dim,
            x: take(&self.x, nt),
            run_avg_x: take(&self.run_avg_x, nt),
            r: take(&self.r, nt),
            mu: take(&self.mu, nt * self.d),
            sigma: take(&self.sigma, nt * self.d * self.n),
            dw: take(&self.dw, ns * self.n),
        }
    }

    /// CSV dump, columns: path, step, t, X, r, mu_0.., sigma_00.., dW_0..
    /// (dW columns are empty strings at the terminal step).
    pub fn dump_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "path,step,t,X,r")?;
        for j in 0..self.d {
            write!(out, ",mu_{j}")?;
        }
        for i in 0..self.d {
            for j in 0..self.n {
                write!(out, ",sigma_{i}{j}")?;
            }
        }
        for j in 0..self.n {
            write!(out, ",dW_{j}")?;
        }
        writeln!(out)?;
        for p in 0..self.n_paths {
            for s in 0..self.grid.n_times() {
                write!(
                    out,
                    "{p},{s},{},{},{}",
                    self.grid.t(s),
                    self.factor(p, s),
                    self.rate(p, s)
                )?;
                let base = self.ts_idx(p, s) * self.d;
                for j in 0..self.d {
                    write!(out, ",{}", self.mu[base + j])?;
                }
                let sbase = self.ts_idx(p, s) * self.d * self.n;
                for k in 0..self.d * self.n {
                    write!(out, ",{}", self.sigma[sbase + k])?;
                }
                if s < self.grid.steps {
                    let wbase = (p * self.grid.steps + s) * self.n;
                    for j in 0..self.n {
                        write!(out, ",{}", self.dw[wbase + j])?;
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

/// SplitMix64 finalizer; decorrelates per-path RNG streams from (seed, path).
fn mix_seed(seed: u64, path: u64) -> u64 {
    let mut z = seed ^ path.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Simulates factor and coefficient paths. Path `i` is generated from its own
/// counter-based stream, so results are identical however paths are batched.
pub fn simulate_factors(
    model: &MarketModel,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<MarketPaths> {
    model.validate()?;
    if n_paths < 1 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    let (d, n) = model.dims();
    let nt = grid.n_times();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let state_dim = match model {
        MarketModel::Constant { .. } => 0,
        MarketModel::PathDependentRate { .. } => 2,
        _ => 1,
    };
    let mut paths = MarketPaths {
        grid,
        n_paths,
        d,
        n,
        seed,
        overflow: false,
        state_dim,
        x: vec![0.0; n_paths * nt],
        run_avg_x: vec![0.0; n_paths * nt],
        r: vec![0.0; n_paths * nt],
        mu: vec![0.0; n_paths * nt * d],
        sigma: vec![0.0; n_paths * nt * d * n],
        dw: vec![0.0; n_paths * grid.steps * n],
    };

    for p in 0..n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, p as u64));
        // Brownian increments first: the stream layout is (step, component)
        for s in 0..grid.steps {
            for j in 0..n {
                paths.dw[(p * grid.steps + s) * n + j] = sqrt_dt * standard_normal(&mut rng);
            }
        }
        simulate_one_path(model, &mut paths, p, dt)?;
    }

    let cap = COEFF_OVERFLOW_CAP;
    paths.overflow = paths.mu.iter().chain(paths.sigma.iter()).chain(paths.r.iter()).any(|v| {
        v.abs() > cap
    });
    Ok(paths)
}

fn simulate_one_path(model: &MarketModel, paths: &mut MarketPaths, p: usize, dt: f64) -> Result<()> {
    let nt = paths.grid.n_times();
    let (d, n) = (paths.d, paths.n);
    let idx = |s: usize| p * nt + s;

    // factor recursion
    match model {
        MarketModel::Constant { .. } => {}
        MarketModel::Heston { b, l, a, x0, .. } => {
            paths.x[idx(0)] = *x0;
            for s in 0..paths.grid.steps {
                let x = paths.x[idx(s)];
                let xp = x.max(0.0);
                let dw1 = paths.dw[(p * paths.grid.steps + s) * n];
                paths.x[idx(s + 1)] = x + b * (l - xp) * dt + a * xp.sqrt() * dw1;
            }
        }
        MarketModel::LinearDiffusion { b, a, x0, .. } => {
            paths.x[idx(0)] = *x0;
            for s in 0..paths.grid.steps {
                let x = paths.x[idx(s)];
                let dw1 = paths.dw[(p * paths.grid.steps + s) * n];
                paths.x[idx(s + 1)] = x - b * x * dt + a * dw1;
            }
        }
        MarketModel::Cir { b, l, a, r0, .. } => {
            paths.x[idx(0)] = *r0;
            for s in 0..paths.grid.steps {
                let x = paths.x[idx(s)];
                let xp = x.max(0.0);
                let dw1 = paths.dw[(p * paths.grid.steps + s) * n];
                paths.x[idx(s + 1)] = x + (b - l * xp) * dt + a * xp.sqrt() * dw1;
            }
        }
        MarketModel::PathDependentRate { base, .. } => {
            // the base model owns the factor dynamics
            simulate_one_path(base, paths, p, dt)?;
        }
    }

    // running average of the factor (left rectangles)
    paths.run_avg_x[idx(0)] = paths.x[idx(0)];
    let mut integral = 0.0;
    for s in 1..nt {
        integral += paths.x[idx(s - 1)] * dt;
        paths.run_avg_x[idx(s)] = integral / (dt * s as f64);
    }

    // coefficient processes
    match model {
        MarketModel::Constant { r, mu, sigma } => {
            for s in 0..nt {
                paths.r[idx(s)] = *r;
                for j in 0..d {
                    paths.mu[idx(s) * d + j] = mu[j];
                }
                for i in 0..d {
                    for j in 0..n {
                        paths.sigma[idx(s) * d * n + i * n + j] = sigma[i][j];
                    }
                }
            }
        }
        MarketModel::Heston { lambda, sigma, rho, rate, .. } => {
            for s in 0..nt {
                // truncated-Euler paths can touch zero variance, which would
                // degenerate sigma; mu'Sigma^{-1}sigma, sigma'Sigma^{-1}sigma
                // and the squared market price of risk all have finite limits
                // as X -> 0, so a tiny floor reproduces them
                let xp = paths.x[idx(s)].max(VARIANCE_FLOOR);
                paths.r[idx(s)] = *rate;
                paths.mu[idx(s)] = lambda * xp;
                let vol = xp.sqrt() * sigma;
                paths.sigma[idx(s) * n] = vol * rho;
                paths.sigma[idx(s) * n + 1] = vol * (1.0 - rho * rho).sqrt();
            }
        }
        MarketModel::LinearDiffusion { sigma, lambda0, lambda1, rho, rate, .. } => {
            for s in 0..nt {
                let x = paths.x[idx(s)];
                paths.r[idx(s)] = *rate;
                paths.mu[idx(s)] = sigma * (lambda0 + lambda1 * x);
                paths.sigma[idx(s) * n] = sigma * rho;
                paths.sigma[idx(s) * n + 1] = sigma * (1.0 - rho * rho).sqrt();
            }
        }
        MarketModel::Cir { mu, sigma, rho, .. } => {
            for s in 0..nt {
                paths.r[idx(s)] = paths.x[idx(s)].max(0.0);
                paths.mu[idx(s)] = *mu;
                paths.sigma[idx(s) * n] = sigma * rho;
                paths.sigma[idx(s) * n + 1] = sigma * (1.0 - rho * rho).sqrt();
            }
        }
        MarketModel::PathDependentRate { kappa0, kappa1, r_min, r_max, .. } => {
            for s in 0..nt {
                let avg = paths.run_avg_x[idx(s)];
                paths.r[idx(s)] = (kappa0 + kappa1 * avg).clamp(*r_min, *r_max);
            }
        }
    }
    Ok(())
}
