//! Experiment orchestration: JSON config ingestion with schema validation,
//! the simulate -> solve -> controls -> verify -> dualize pipeline, and
//! report/CSV emission with stable field names.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bsde::{ode_oracle, solve_bsde_on, AssumptionParams, SolverConfig};
use crate::diagnostics::{
    check_model_conditions, class_d_bounds, martingale_check_q, ExponentialMoment,
    ModelConditions,
};
use crate::duality::{
    duality_gap, evaluate_dual_utility, multiplier_y_star, optimal_density,
};
use crate::error::{Error, Result};
use crate::market::{simulate_factors, MarketModel, TimeGrid};
use crate::preferences::Preferences;
use crate::regression::mean_stderr;
use crate::strategy::{evaluate_recursive_utility, optimal_controls};

pub const CONFIG_SCHEMA: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../schemas/config.schema.json"));
pub const REPORT_SCHEMA: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../schemas/report.schema.json"));

/// Process exit codes: 0 success, 2 config/schema violation, 3 numerical
/// failure, 4 diagnostics assertion failure.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_DIAGNOSTICS: i32 = 4;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PreferencesConfig {
    pub gamma: f64,
    pub psi: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AssumptionConfig {
    pub p: f64,
    pub q: f64,
}

fn default_omega() -> f64 {
    1.0
}

fn default_degree() -> usize {
    2
}

/// Pipeline stages that can be requested. An empty list yields a header-only
/// report echoing the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Solve,
    Verify,
    Duality,
    Conditions,
    Moments,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: MarketModel,
    pub preferences: PreferencesConfig,
    pub grid: GridConfig,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "default_omega")]
    pub omega: f64,
    pub assumption: AssumptionConfig,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default)]
    pub experiments: Vec<Stage>,
}

impl ExperimentConfig {
    /// Parses and validates a JSON config: schema first, then the semantic
    /// invariants the numeric types enforce.
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Value = serde_json::from_str(CONFIG_SCHEMA)?;
        let instance: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        validate_schema(&schema, &instance, "$")
            .map_err(Error::Config)?;
        let cfg: ExperimentConfig = serde_json::from_value(instance)
            .map_err(|e| Error::Config(format!("config does not deserialize: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        let prefs = Preferences::new(self.preferences.gamma, self.preferences.psi, self.preferences.delta)
            .map_err(|e| Error::Config(e.to_string()))?;
        AssumptionParams::new(self.assumption.p, self.assumption.q, prefs.gamma)
            .map_err(|e| Error::Config(e.to_string()))?;
        TimeGrid::new(self.grid.horizon, self.grid.steps)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be >= 1".into()));
        }
        if !(self.omega > 0.0) {
            return Err(Error::Config("omega must be > 0".into()));
        }
        Ok(())
    }

    fn wants(&self, stage: Stage) -> bool {
        self.experiments.contains(&stage)
    }
}

/// The JSON summary. Field names are stable; stages that did not run leave
/// nulls. Serialization order is fixed by the struct, so identical configs
/// produce byte-identical reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct Report {
    pub version: u32,
    pub config: ExperimentConfig,
    pub Y0: Option<f64>,
    pub Y0_stderr: Option<f64>,
    /// Independent backward ODE value of Y_0 (deterministic-coefficient
    /// models only).
    pub Y0_ode: Option<f64>,
    pub V0: Option<f64>,
    pub V0_stderr: Option<f64>,
    pub pi_star_t0: Option<f64>,
    pub cons_frac_t0: Option<f64>,
    pub y_star: Option<f64>,
    pub U0: Option<f64>,
    pub algebraic_gap: Option<f64>,
    pub mc_gap: Option<f64>,
    pub mc_gap_stderr: Option<f64>,
    pub EQ_T: Option<f64>,
    pub EQ_T_stderr: Option<f64>,
    pub entropy: Option<f64>,
    pub entropy_bound: Option<f64>,
    pub entropy_within_bound: Option<bool>,
    pub conditions: Option<ModelConditions>,
    pub moments: Option<MomentsSection>,
    pub floored_paths: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentsSection {
    pub y_plus_running_max: ExponentialMoment,
    pub mpr_integral: ExponentialMoment,
    pub rate_negative_integral: ExponentialMoment,
    pub novikov_proxy: ExponentialMoment,
    pub class_d_sup_mean: f64,
    pub class_d_finite: bool,
}

impl Report {
    fn empty(config: &ExperimentConfig) -> Self {
        Report {
            version: 1,
            config: config.clone(),
            Y0: None,
            Y0_stderr: None,
            Y0_ode: None,
            V0: None,
            V0_stderr: None,
            pi_star_t0: None,
            cons_frac_t0: None,
            y_star: None,
            U0: None,
            algebraic_gap: None,
            mc_gap: None,
            mc_gap_stderr: None,
            EQ_T: None,
            EQ_T_stderr: None,
            entropy: None,
            entropy_bound: None,
            entropy_within_bound: None,
            conditions: None,
            moments: None,
            floored_paths: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Re-validates the emitted JSON against the shipped report schema.
    pub fn validate_against_schema(&self) -> Result<()> {
        let schema: Value = serde_json::from_str(REPORT_SCHEMA)?;
        let instance: Value = serde_json::to_value(self)?;
        validate_schema(&schema, &instance, "$").map_err(Error::Config)
    }

    /// 0, or 4 when a diagnostics assertion failed.
    pub fn exit_code(&self) -> i32 {
        if let Some(c) = &self.conditions {
            if !c.satisfied {
                return EXIT_DIAGNOSTICS;
            }
        }
        if self.entropy_within_bound == Some(false) {
            return EXIT_DIAGNOSTICS;
        }
        EXIT_OK
    }
}

/// Runs the requested stages in dependency order and optionally dumps
/// per-path CSVs (market.csv, strategy.csv, dual.csv) to `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Report> {
    config.validate()?;
    let mut report = Report::empty(config);
    let prefs =
        Preferences::new(config.preferences.gamma, config.preferences.psi, config.preferences.delta)?;
    let assumption = AssumptionParams::new(config.assumption.p, config.assumption.q, prefs.gamma)?;
    let grid = TimeGrid::new(config.grid.horizon, config.grid.steps)?;

    if config.wants(Stage::Conditions) {
        report.conditions = Some(check_model_conditions(
            &config.model,
            config.assumption.q,
            prefs.gamma,
            config.grid.horizon,
        )?);
    }

    let needs_solve = config.wants(Stage::Solve)
        || config.wants(Stage::Verify)
        || config.wants(Stage::Duality)
        || config.wants(Stage::Moments);
    let needs_paths = needs_solve || out_dir.is_some();
    if !needs_paths {
        return Ok(report);
    }

    let paths = simulate_factors(&config.model, grid, config.n_paths, config.seed)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("market.csv"))?;
        paths.dump_csv(&mut f)?;
    }
    if !needs_solve {
        return Ok(report);
    }

    let solver_cfg = SolverConfig { basis_degree: config.basis_degree, ..Default::default() };
    let sol = solve_bsde_on(&paths, &prefs, &solver_cfg)?;
    report.Y0 = Some(sol.y0);
    report.Y0_stderr = Some(sol.y0_stderr);
    report.cons_frac_t0 =
        Some(prefs.delta.powf(prefs.psi) * (prefs.exp_rate() * sol.y0).exp());
    if matches!(config.model, MarketModel::Constant { .. }) {
        let coeffs = paths.coefficients_at(0, 0)?;
        let oracle = ode_oracle(&prefs, |_| coeffs.clone(), grid, 10)?;
        report.Y0_ode = Some(oracle[0]);
    }

    let needs_controls = config.wants(Stage::Verify) || config.wants(Stage::Duality);
    let mut primal = None;
    if needs_controls {
        let strat = optimal_controls(&sol, &paths, &prefs, config.omega)?;
        report.floored_paths = Some(strat.n_floored());
        let first_pi: Vec<f64> = (0..paths.n_paths.min(512))
            .map(|p| strat.portfolio(p, 0)[0])
            .collect();
        report.pi_star_t0 = Some(mean_stderr(&first_pi).0);
        let est = evaluate_recursive_utility(&strat, &paths, &prefs, config.basis_degree)?;
        report.V0 = Some(est.v0);
        report.V0_stderr = Some(est.stderr);
        primal = Some(est);
        if let Some(dir) = out_dir {
            let mut f = fs::File::create(dir.join("strategy.csv"))?;
            strat.dump_csv(&mut f)?;
        }
    }

    if config.wants(Stage::Verify) || config.wants(Stage::Moments) {
        let chk = martingale_check_q(&paths, &sol, &prefs, &assumption)?;
        if config.wants(Stage::Verify) {
            report.EQ_T = Some(chk.e_q_t);
            report.EQ_T_stderr = Some(chk.e_q_t_stderr);
            report.entropy = Some(chk.entropy);
            report.entropy_bound = Some(chk.entropy_bound);
            report.entropy_within_bound = Some(chk.entropy_within_bound);
        }
        if config.wants(Stage::Moments) {
            let cd = class_d_bounds(&paths, &sol, &prefs, &assumption)?;
            report.moments = Some(MomentsSection {
                y_plus_running_max: chk.moment_y_plus,
                mpr_integral: chk.moment_mpr,
                rate_negative_integral: chk.moment_rate_neg,
                novikov_proxy: chk.novikov_proxy,
                class_d_sup_mean: cd.sup_mean,
                class_d_finite: cd.finite,
            });
        }
    }

    if config.wants(Stage::Duality) {
        let est = primal.as_ref().expect("controls ran for duality");
        let gap = duality_gap(&sol, est, &prefs, config.omega);
        report.y_star = Some(gap.y_star);
        report.U0 = Some(gap.u0);
        report.algebraic_gap = Some(gap.algebraic_gap);
        report.mc_gap = Some(gap.mc_gap);
        report.mc_gap_stderr = Some(gap.mc_gap_stderr);
        if let Some(dir) = out_dir {
            let dual = optimal_density(&paths, &sol)?;
            // also checks the dual recursion runs on this instance
            let _ = evaluate_dual_utility(
                &dual,
                multiplier_y_star(config.omega, sol.y0, &prefs),
                &paths,
                &prefs,
                config.basis_degree,
            )?;
            let mut f = fs::File::create(dir.join("dual.csv"))?;
            dual.dump_csv(&mut f)?;
        }
    }

    Ok(report)
}

/// Minimal JSON Schema checker covering the subset the shipped schemas use:
/// type, required, properties, additionalProperties (boolean), items, enum,
/// minimum, exclusiveMinimum, oneOf.
pub fn validate_schema(schema: &Value, instance: &Value, at: &str) -> std::result::Result<(), String> {
    let obj = match schema.as_object() {
        Some(o) => o,
        None => return Ok(()),
    };
    if let Some(one_of) = obj.get("oneOf").and_then(|v| v.as_array()) {
        let hits = one_of
            .iter()
            .filter(|s| validate_schema(s, instance, at).is_ok())
            .count();
        if hits != 1 {
            return Err(format!("{at}: matched {hits} of the oneOf alternatives, expected 1"));
        }
    }
    if let Some(types) = obj.get("type") {
        let allowed: Vec<&str> = match types {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(|v| v.as_str()).collect(),
            _ => vec![],
        };
        let actual = match instance {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Number(n) => {
                if n.is_u64() || n.is_i64() {
                    "integer"
                } else {
                    "number"
                }
            }
            Value::String(_) => "string",
            Value::Array(_) => "array",
            Value::Object(_) => "object",
        };
        let ok = allowed.iter().any(|t| {
            *t == actual || (*t == "number" && actual == "integer")
        });
        if !ok {
            return Err(format!("{at}: expected type {allowed:?}, got {actual}"));
        }
    }
    if let Some(en) = obj.get("enum").and_then(|v| v.as_array()) {
        if !en.contains(instance) {
            return Err(format!("{at}: value {instance} not in enum"));
        }
    }
    if let Some(min) = obj.get("minimum").and_then(|v| v.as_f64()) {
        if let Some(x) = instance.as_f64() {
            if x < min {
                return Err(format!("{at}: {x} below minimum {min}"));
            }
        }
    }
    if let Some(min) = obj.get("exclusiveMinimum").and_then(|v| v.as_f64()) {
        if let Some(x) = instance.as_f64() {
            if x <= min {
                return Err(format!("{at}: {x} not above exclusive minimum {min}"));
            }
        }
    }
    if let Some(inst) = instance.as_object() {
        if let Some(req) = obj.get("required").and_then(|v| v.as_array()) {
            for key in req.iter().filter_map(|v| v.as_str()) {
                if !inst.contains_key(key) {
                    return Err(format!("{at}: missing required property '{key}'"));
                }
            }
        }
        let props = obj.get("properties").and_then(|v| v.as_object());
        if let Some(props) = props {
            for (key, sub) in props {
                if let Some(v) = inst.get(key) {
                    validate_schema(sub, v, &format!("{at}.{key}"))?;
                }
            }
        }
        if obj.get("additionalProperties") == Some(&Value::Bool(false)) {
            for key in inst.keys() {
                if props.map_or(true, |p| !p.contains_key(key)) {
                    return Err(format!("{at}: unknown property '{key}'"));
                }
            }
        }
    }
    if let (Some(items), Some(arr)) = (obj.get("items"), instance.as_array()) {
        for (i, v) in arr.iter().enumerate() {
            validate_schema(items, v, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_config(experiments: &str) -> String {
        format!(
            r#"{{
                "version": 1,
                "model": {{"variant": "constant", "r": 0.02, "mu": [0.06], "sigma": [[0.2]]}},
                "preferences": {{"gamma": 2.0, "psi": 2.0, "delta": 1.0}},
                "grid": {{"horizon": 1.0, "steps": 50}},
                "n_paths": 2000,
                "seed": 7,
                "omega": 1.0,
                "assumption": {{"p": 2.0, "q": 2.0}},
                "basis_degree": 2,
                "experiments": [{experiments}]
            }}"#
        )
    }

    #[test]
    fn config_schema_accepts_reference_and_rejects_garbage() {
        let cfg = ExperimentConfig::from_json(&reference_config("\"solve\"")).unwrap();
        assert_eq!(cfg.n_paths, 2000);

        for bad in [
            r#"{"version": 1}"#,
            &reference_config("\"solve\"").replace("\"gamma\": 2.0", "\"gamma\": 0.5"),
            &reference_config("\"solve\"").replace("\"version\": 1", "\"version\": 9"),
            &reference_config("\"solve\"").replace("2000", "0"),
            &reference_config("\"frobnicate\""),
        ] {
            assert!(
                matches!(ExperimentConfig::from_json(bad), Err(Error::Config(_))),
                "accepted: {bad}"
            );
        }
    }

    #[test]
    fn empty_experiment_list_yields_header_only_report() {
        let cfg = ExperimentConfig::from_json(&reference_config("")).unwrap();
        let report = run_experiment(&cfg, None).unwrap();
        assert!(report.Y0.is_none() && report.V0.is_none() && report.conditions.is_none());
        assert_eq!(report.config.seed, 7);
        report.validate_against_schema().unwrap();
        assert_eq!(report.exit_code(), EXIT_OK);
    }

    #[test]
    fn single_step_zero_horizon_degenerates_to_bequest() {
        let text = reference_config("\"solve\", \"verify\"")
            .replace("\"horizon\": 1.0, \"steps\": 50", "\"horizon\": 0.0, \"steps\": 1");
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        let report = run_experiment(&cfg, None).unwrap();
        assert_eq!(report.Y0.unwrap(), 0.0);
        assert!((report.V0.unwrap() - (-1.0)).abs() < 1e-12); // bequest of omega = 1 at gamma = 2
    }

    #[test]
    fn full_pipeline_populates_all_fields_and_revalidates() {
        let cfg = ExperimentConfig::from_json(&reference_config(
            "\"solve\", \"verify\", \"duality\", \"conditions\", \"moments\"",
        ))
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, Some(dir.path())).unwrap();
        assert!(report.Y0.is_some());
        assert!(report.V0.is_some());
        assert!(report.pi_star_t0.is_some());
        assert!(report.cons_frac_t0.is_some());
        assert!(report.y_star.is_some());
        assert!(report.U0.is_some());
        assert!(report.algebraic_gap.unwrap() < 1e-12);
        assert!(report.mc_gap.is_some());
        assert!(report.EQ_T.is_some());
        assert!(report.entropy.is_some());
        assert!(report.entropy_bound.is_some());
        assert!(report.conditions.as_ref().unwrap().satisfied);
        assert!(report.moments.is_some());
        report.validate_against_schema().unwrap();
        assert_eq!(report.exit_code(), EXIT_OK);
        // oracle emitted alongside, and the solver agrees with it
        assert!((report.Y0.unwrap() - report.Y0_ode.unwrap()).abs() <= 0.02);
        for f in ["market.csv", "strategy.csv", "dual.csv"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
    }

    #[test]
    fn reports_are_byte_identical_for_identical_configs() {
        let cfg = ExperimentConfig::from_json(&reference_config("\"solve\", \"duality\", \"verify\""))
            .unwrap();
        let a = run_experiment(&cfg, None).unwrap().to_json().unwrap();
        let b = run_experiment(&cfg, None).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditions_only_square_root_rate_pass_case() {
        let text = reference_config("\"conditions\"").replace(
            r#"{"variant": "constant", "r": 0.02, "mu": [0.06], "sigma": [[0.2]]}"#,
            r#"{"variant": "cir", "b": 1.0, "l": 2.0, "a": 1.0, "r0": 0.05, "mu": 0.05, "sigma": 0.2, "eps": 0.1, "rho": 0.0}"#,
        ).replace("\"q\": 2.0", "\"q\": 1.5");
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        let report = run_experiment(&cfg, None).unwrap();
        let conds = report.conditions.as_ref().unwrap();
        assert!(conds.satisfied);
        assert!(conds.checks.iter().all(|c| c.satisfied));
        assert_eq!(report.exit_code(), EXIT_OK);

        // gamma = 3 breaks integrability and surfaces as exit code 4
        let bad = text.replace("\"gamma\": 2.0", "\"gamma\": 3.0");
        let cfg = ExperimentConfig::from_json(&bad).unwrap();
        let report = run_experiment(&cfg, None).unwrap();
        assert!(!report.conditions.as_ref().unwrap().satisfied);
        assert_eq!(report.exit_code(), EXIT_DIAGNOSTICS);
    }

    #[test]
    fn schema_validator_basics() {
        let schema: Value = serde_json::from_str(
            r#"{
                "type": "object",
                "required": ["a"],
                "additionalProperties": false,
                "properties": {
                    "a": {"type": "number", "exclusiveMinimum": 0},
                    "b": {"type": "array", "items": {"enum": ["x", "y"]}}
                }
            }"#,
        )
        .unwrap();
        let ok: Value = serde_json::from_str(r#"{"a": 1.5, "b": ["x"]}"#).unwrap();
        assert!(validate_schema(&schema, &ok, "$").is_ok());
        for bad in [
            r#"{"b": ["x"]}"#,
            r#"{"a": 0}"#,
            r#"{"a": 1, "b": ["z"]}"#,
            r#"{"a": 1, "c": 2}"#,
            r#"{"a": "one"}"#,
        ] {
            let v: Value = serde_json::from_str(bad).unwrap();
            assert!(validate_schema(&schema, &v, "$").is_err(), "accepted {bad}");
        }
    }
}
