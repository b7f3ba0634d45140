//! Least-squares conditional expectations on a polynomial basis, shared by
//! the backward BSDE scheme and the recursive-utility evaluation so both
//! sides of any primal/dual comparison carry the same regression bias.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};

/// Columns with standard deviation below this are dropped as redundant with
/// the intercept (e.g. every state is identical at t = 0).
const CONSTANT_COLUMN_TOL: f64 = 1e-12;

/// One fitted regression problem: design matrix built from monomials of the
/// state variables up to a total degree, factorized once and reused for
/// every target at the same time step.
pub struct ConditionalRegression {
    design: DMatrix<f64>,
    svd: SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    pub n_basis: usize,
}

/// All monomial exponent tuples of `k` variables with total degree in 1..=degree.
fn monomial_exponents(k: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; k];
    fn rec(i: usize, remaining: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == current.len() {
            if current.iter().sum::<usize>() > 0 {
                out.push(current.clone());
            }
            return;
        }
        for e in 0..=remaining {
            current[i] = e;
            rec(i + 1, remaining - e, current, out);
        }
        current[i] = 0;
    }
    rec(0, degree, &mut current, &mut out);
    out
}

impl ConditionalRegression {
    /// `states` is paths x k (k may be 0); the basis is {1} union monomials of
    /// total degree <= `degree`, with constant columns dropped and the rest
    /// standardized for conditioning.
    pub fn new(states: &DMatrix<f64>, degree: usize) -> Result<Self> {
        let p = states.nrows();
        if p == 0 {
            return Err(Error::InvalidParameter("regression needs at least one path".into()));
        }
        let k = states.ncols();
        let exps = if degree == 0 { vec![] } else { monomial_exponents(k, degree) };

        let mut columns: Vec<DVector<f64>> = vec![DVector::from_element(p, 1.0)];
        for e in &exps {
            let mut col = DVector::from_element(p, 1.0);
            for row in 0..p {
                let mut v = 1.0;
                for (j, &ej) in e.iter().enumerate() {
                    v *= states[(row, j)].powi(ej as i32);
                }
                col[row] = v;
            }
            // standardize; drop if (numerically) constant
            let mean = col.sum() / p as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let sd = var.sqrt();
            if sd > CONSTANT_COLUMN_TOL {
                for v in col.iter_mut() {
                    *v = (*v - mean) / sd;
                }
                columns.push(col);
            }
        }

        let n_basis = columns.len();
        let mut design = DMatrix::zeros(p, n_basis);
        for (j, col) in columns.into_iter().enumerate() {
            design.set_column(j, &col);
        }
        let svd = SVD::new(design.clone(), true, true);
        Ok(Self { design, svd, n_basis })
    }

    /// Fitted values of the least-squares projection of `target` onto the
    /// basis, plus the RMS residual.
    pub fn fit(&self, target: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let beta = self
            .svd
            .solve(target, 1e-10)
            .map_err(|e| Error::RankDeficient { step: 0, detail: e.to_string() })?;
        let fitted = &self.design * beta;
        let p = target.len() as f64;
        let resid = ((target - &fitted).norm_squared() / p).sqrt();
        Ok((fitted, resid))
    }
}

/// Pairwise (tree) summation; the result does not depend on how work is
/// batched, unlike a left fold.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let ss: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&ss) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean and standard error from `n_batches` disjoint batch means; the
/// estimator of choice for fat-tailed exponential functionals.
pub fn batch_mean_stderr(xs: &[f64], n_batches: usize) -> (f64, f64) {
    let b = n_batches.min(xs.len()).max(1);
    let means: Vec<f64> = (0..b)
        .map(|i| {
            let lo = i * xs.len() / b;
            let hi = (i + 1) * xs.len() / b;
            pairwise_sum(&xs[lo..hi]) / (hi - lo) as f64
        })
        .collect();
    let (mean, se) = mean_stderr(&means);
    (mean, se)
}
