//! Drives the full experiment pipeline through the same entry point the CLI
//! uses: parse a JSON config, run all stages, and print the JSON report.

use ezbsde::report::{run_experiment, ExperimentConfig, Stage};

fn main() -> ezbsde::Result<()> {
    let config_json = r#"{
        "version": 1,
        "model": {
            "variant": "heston",
            "b": 1.0, "l": 0.25, "a": 0.5, "lambda": 0.5,
            "sigma": 1.0, "rho": -0.5, "x0": 0.25, "rate": 0.02
        },
        "preferences": { "gamma": 2.0, "psi": 2.0, "delta": 0.05 },
        "grid": { "horizon": 1.0, "steps": 25 },
        "n_paths": 2000,
        "seed": 99,
        "omega": 1.0,
        "assumption": { "p": 2.0, "q": 2.0 },
        "basis_degree": 2
    }"#;

    let mut config = ExperimentConfig::from_json(config_json)?;
    config.experiments =
        vec![Stage::Solve, Stage::Verify, Stage::Duality, Stage::Conditions, Stage::Moments];

    let report = run_experiment(&config, None)?;
    report.validate_against_schema()?;
    println!("{}", report.to_json()?);
    eprintln!("exit code would be {}", report.exit_code());
    Ok(())
}
