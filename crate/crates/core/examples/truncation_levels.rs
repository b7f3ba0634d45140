//! Shows the monotone behaviour of the truncated BSDE solutions: the initial
//! value Y0 is nonincreasing in the cap m on the exponential generator term
//! and in the stopping level k that switches off the negative part, and
//! nondecreasing in the level n that switches off the positive part.

use ezbsde::bsde::{solve_bsde_on, SolverConfig};
use ezbsde::market::{simulate_factors, MarketModel, TimeGrid};
use ezbsde::preferences::Preferences;

fn main() -> ezbsde::Result<()> {
    // deliberately large rate and market price of risk over a long horizon,
    // so the running-integral stopping levels actually bind
    let model = MarketModel::Constant {
        r: 0.6,
        mu: vec![1.2f64.sqrt()],
        sigma: vec![vec![1.0]],
    };
    let prefs = Preferences::new(2.0, 2.0, 1.0)?;
    let paths = simulate_factors(&model, TimeGrid::new(3.0, 10)?, 500, 1)?;

    let solve = |m: f64, n_level: f64, k_level: f64| -> ezbsde::Result<f64> {
        let cfg = SolverConfig {
            basis_degree: 2,
            truncation_m: m,
            n_level,
            k_level,
            stderr_batches: 0,
            ..Default::default()
        };
        Ok(solve_bsde_on(&paths, &prefs, &cfg)?.y0)
    };

    let inf = f64::INFINITY;
    println!("Y0 as the generator cap m grows (expect nonincreasing):");
    for m in [1.0, 10.0, 100.0] {
        println!("    m = {m:>5}: Y0 = {:+.6}", solve(m, inf, inf)?);
    }
    println!("Y0 as the positive-part level n grows (expect nondecreasing):");
    for n in [1.0, 5.0, inf] {
        println!("    n = {n:>5}: Y0 = {:+.6}", solve(100.0, n, inf)?);
    }
    println!("Y0 as the negative-part level k grows (expect nonincreasing):");
    for k in [1.0, 5.0, inf] {
        println!("    k = {k:>5}: Y0 = {:+.6}", solve(100.0, inf, k)?);
    }
    Ok(())
}
