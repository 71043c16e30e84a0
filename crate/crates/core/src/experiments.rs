//! Command orchestration for the `delayctl` binary: configuration
//! resolution, runs, CSV tables, summaries and the on-disk value cache.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::approx::{
    construct_eps_optimal_combined, construct_eps_optimal_nostate, construct_eps_optimal_pointwise,
    epsilon_truncation_time, write_sweep_csv, ApproxOptions,
};
use crate::dini::cantor_counterexample;
use crate::dynamics::{integrate, objective_of, write_trajectory_csv, ControlPath, TailPolicy};
use crate::error::{Error, Result};
use crate::feedback::{closed_loop_solve, verify_optimality, FeedbackPolicy};
use crate::hilbert::{pointwise_delay_counterexample, write_counterexample_csv};
use crate::model::{preset, validate_config, ConfigFile, HistoryState, Numerics, ProblemConfig};
use crate::value::{estimate_value, partial_eta0, property_scan, ValueEstimate, ValueOptions};

/// Environment variable naming the value-cache directory.
pub const CACHE_ENV: &str = "DELAYCTL_CACHE_DIR";

const DEFAULT_HORIZON: f64 = 10.0;
const ORACLE_KNOTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Value,
    Feedback,
    Verify,
    ApproxNostate,
    ApproxPointwise,
    ApproxCombined,
    Counterexamples,
    Validate,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Simulate,
        Command::Value,
        Command::Feedback,
        Command::Verify,
        Command::ApproxNostate,
        Command::ApproxPointwise,
        Command::ApproxCombined,
        Command::Counterexamples,
        Command::Validate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Value => "value",
            Command::Feedback => "feedback",
            Command::Verify => "verify",
            Command::ApproxNostate => "approx-nostate",
            Command::ApproxPointwise => "approx-pointwise",
            Command::ApproxCombined => "approx-combined",
            Command::Counterexamples => "counterexamples",
            Command::Validate => "validate",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown command '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentManifest {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub preset: Option<String>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub horizon: Option<f64>,
    pub eps: Option<f64>,
    /// Constant initial history value.
    pub eta0: f64,
    pub n_hist: Option<usize>,
    pub substeps: Option<usize>,
    pub knots: Option<usize>,
    /// Random samples of the `value` property scan.
    pub samples: usize,
    /// Constant consumption of `simulate`.
    pub consumption: f64,
}

impl ExperimentManifest {
    pub fn new(command: Command, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            command,
            config_path: None,
            preset: None,
            out_dir: out_dir.into(),
            seed: 0,
            workers: 1,
            horizon: None,
            eps: None,
            eta0: 1.0,
            n_hist: None,
            substeps: None,
            knots: None,
            samples: 0,
            consumption: 0.0,
        }
    }

    pub fn with_preset(mut self, name: &str) -> Self {
        self.preset = Some(name.to_string());
        self
    }

    /// Config file if given, else the preset; numerics overrides on top.
    pub fn resolve_config(&self) -> Result<ProblemConfig> {
        let cfg = match (&self.config_path, &self.preset) {
            (Some(path), _) => ConfigFile::parse(&fs::read_to_string(path)?)?.resolve()?,
            (None, Some(name)) => preset(name)?,
            (None, None) => return Err(Error::InvalidConfig("either --config or --preset is required".into())),
        };
        if self.n_hist.is_none() && self.substeps.is_none() {
            return Ok(cfg);
        }
        cfg.with_numerics(Numerics {
            n_hist: self.n_hist.unwrap_or(cfg.numerics.n_hist),
            substeps: self.substeps.unwrap_or(cfg.numerics.substeps),
        })
    }

    fn value_options(&self) -> ValueOptions {
        let mut o = ValueOptions::default();
        if let Some(k) = self.knots {
            o.knots = k;
        }
        o
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub artifacts: Vec<String>,
    pub summary: Value,
}

/// Runs one command and writes `manifest.json`, `summary.json` and the
/// command's CSV tables into `out_dir`.
pub fn run(manifest: &ExperimentManifest) -> Result<RunOutcome> {
    let started = Instant::now();
    fs::create_dir_all(&manifest.out_dir)?;
    let mut out = Outputs { dir: manifest.out_dir.clone(), written: Vec::new() };
    let (config_hash, summary) = match manifest.command {
        Command::Counterexamples => (None, counterexamples(&mut out)?),
        cmd => {
            let cfg = manifest.resolve_config()?;
            let summary = match cmd {
                Command::Simulate => simulate(manifest, &cfg, &mut out)?,
                Command::Value => value(manifest, &cfg, &mut out)?,
                Command::Feedback => feedback(manifest, &cfg, &mut out)?,
                Command::Verify => verify(manifest, &cfg, &mut out)?,
                Command::ApproxNostate | Command::ApproxPointwise | Command::ApproxCombined => {
                    approximation(manifest, &cfg, &mut out)?
                }
                Command::Validate => validate(&cfg, &mut out)?,
                Command::Counterexamples => unreachable!(),
            };
            (Some(cfg.content_hash()), summary)
        }
    };
    out.json("summary.json", &summary)?;
    let record = json!({
        "command": manifest.command,
        "inputs": manifest,
        "config_hash": config_hash,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "artifacts": out.written,
    });
    out.json("manifest.json", &record)?;
    Ok(RunOutcome { artifacts: out.written, summary })
}

/// Machine-readable error record.
pub fn error_record(e: &Error) -> Value {
    json!({ "error": e.kind(), "message": e.to_string() })
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn file(&mut self, name: &str) -> Result<BufWriter<fs::File>> {
        self.written.push(name.to_string());
        Ok(BufWriter::new(fs::File::create(self.dir.join(name))?))
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let mut f = self.file(name)?;
        serde_json::to_writer_pretty(&mut f, v).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
        let mut f = self.file(name)?;
        write(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn history(manifest: &ExperimentManifest, cfg: &ProblemConfig) -> HistoryState {
    HistoryState::constant(manifest.eta0, cfg.n_hist())
}

fn write_control_csv<W: Write>(c: &ControlPath, mut out: W) -> Result<()> {
    writeln!(out, "t,c")?;
    for (i, v) in c.values.iter().enumerate() {
        writeln!(out, "{},{}", i as f64 * c.dt, v)?;
    }
    Ok(())
}

fn simulate(m: &ExperimentManifest, cfg: &ProblemConfig, out: &mut Outputs) -> Result<Value> {
    let horizon = m.horizon.unwrap_or(DEFAULT_HORIZON);
    let eta = history(m, cfg);
    let c = ControlPath::constant(cfg.dt(), m.consumption, horizon);
    let traj = integrate(cfg, &eta, &c, horizon)?;
    out.csv("trajectory.csv", |f| write_trajectory_csv(cfg, &traj, f))?;
    let payoff = if traj.admissible { Some(objective_of(cfg, &traj, &c, TailPolicy::None)?) } else { None };
    Ok(json!({
        "horizon": traj.horizon(),
        "admissible": traj.admissible,
        "min_state": traj.min_value,
        "final_state": traj.final_value(),
        "running_payoff": payoff,
    }))
}

/// Value estimate, read from and written to the cache directory when
/// [`CACHE_ENV`] is set.
pub fn cached_estimate(cfg: &ProblemConfig, eta: &HistoryState, opts: &ValueOptions) -> Result<ValueEstimate> {
    let Some(dir) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
        return estimate_value(cfg, eta, opts);
    };
    let path = cache_path(&dir, cfg, eta, opts);
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(v) = serde_json::from_str::<ValueEstimate>(&text) {
            return Ok(v);
        }
    }
    let v = estimate_value(cfg, eta, opts)?;
    fs::create_dir_all(&dir)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string(&v).map_err(|e| Error::Io(e.to_string()))?)?;
    fs::rename(&tmp, &path)?;
    Ok(v)
}

fn cache_path(dir: &Path, cfg: &ProblemConfig, eta: &HistoryState, opts: &ValueOptions) -> PathBuf {
    let q = |v: f64| (v * 1e12).round() as i64;
    let mut h = Sha256::new();
    h.update(cfg.content_hash().as_bytes());
    h.update(serde_json::to_string(opts).unwrap_or_default().as_bytes());
    h.update(q(eta.eta0).to_le_bytes());
    for v in &eta.eta1 {
        h.update(q(*v).to_le_bytes());
    }
    dir.join(format!("{}.json", hex::encode(h.finalize())))
}

fn value(m: &ExperimentManifest, cfg: &ProblemConfig, out: &mut Outputs) -> Result<Value> {
    let mut opts = m.value_options();
    if let Some(h) = m.horizon {
        opts = opts.with_horizon(h);
    }
    if let Some(e) = m.eps {
        opts.eps = e;
    }
    let eta = history(m, cfg);
    let v = cached_estimate(cfg, &eta, &opts)?;
    let slope = if v.is_finite() { Some(partial_eta0(cfg, &eta, None, &opts, Some(&v))?) } else { None };
    out.csv("value.csv", |f| {
        writeln!(f, "eta0,value,smoothed_value,v_eta0,tolerance,tail_gap,horizon,converged")?;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            eta.eta0,
            v.value,
            v.smoothed_value,
            slope.map(|s| s.to_string()).unwrap_or_default(),
            v.tolerance(),
            v.tail_gap,
            v.horizon,
            v.converged
        )?;
        Ok(())
    })?;
    out.csv("control.csv", |f| write_control_csv(&v.control_path(), f))?;
    let mut summary = json!({
        "value": v.value,
        "v_eta0": slope,
        "tolerance": v.tolerance(),
        "tail_gap": v.tail_gap,
        "horizon": v.horizon,
        "converged": v.converged,
        "solver_iters": v.solver_iters,
    });
    if m.samples > 0 {
        let scan = property_scan(cfg, m.samples, m.seed, &opts)?;
        out.csv("properties.csv", |f| {
            writeln!(f, "check,lhs,rhs,margin")?;
            for (name, a, b, c) in &scan.rows {
                writeln!(f, "{name},{a},{b},{c}")?;
            }
            Ok(())
        })?;
        summary["property_violations"] = json!(scan.violations());
    }
    Ok(summary)
}

fn live_policy(cfg: &ProblemConfig, m: &ExperimentManifest) -> Result<FeedbackPolicy> {
    FeedbackPolicy::live(cfg, m.value_options().with_knots(m.knots.unwrap_or(ORACLE_KNOTS)))
}

fn feedback(m: &ExperimentManifest, cfg: &ProblemConfig, out: &mut Outputs) -> Result<Value> {
    let horizon = m.horizon.unwrap_or(DEFAULT_HORIZON);
    let eta = history(m, cfg);
    let policy = live_policy(cfg, m)?;
    let (traj, path) = closed_loop_solve(&policy, cfg, &eta, horizon)?;
    out.csv("trajectory.csv", |f| write_trajectory_csv(cfg, &traj, f))?;
    let payoff = objective_of(cfg, &traj, &path, TailPolicy::MonotoneFloor)?;
    Ok(json!({
        "horizon": traj.horizon(),
        "payoff": payoff,
        "min_state": traj.min_value,
        "cache": policy.cache_stats(),
    }))
}

fn verify(m: &ExperimentManifest, cfg: &ProblemConfig, out: &mut Outputs) -> Result<Value> {
    let horizon = m.horizon.unwrap_or(DEFAULT_HORIZON);
    let eta = history(m, cfg);
    let policy = live_policy(cfg, m)?;
    let report = verify_optimality(&policy, cfg, &eta, horizon, &ValueOptions::default())?;
    out.csv("verification.csv", |f| {
        let b = &report.items;
        writeln!(f, "item,value")?;
        for (k, v) in [
            ("value_estimate", report.value_estimate),
            ("feedback_payoff", report.feedback_payoff),
            ("gap", report.gap),
            ("value_tail_gap", b.value_tail_gap),
            ("payoff_tail_gap", b.payoff_tail_gap),
            ("estimator_tolerance", b.estimator_tolerance),
            ("oracle_smoothing", b.oracle_smoothing),
            ("gradient_error", b.gradient_error),
            ("budget", report.budget),
        ] {
            writeln!(f, "{k},{v}")?;
        }
        Ok(())
    })?;
    serde_json::to_value(&report).map_err(|e| Error::Io(e.to_string()))
}

fn approximation(m: &ExperimentManifest, cfg: &ProblemConfig, out: &mut Outputs) -> Result<Value> {
    let eta = history(m, cfg);
    let mut opts = ApproxOptions { workers: m.workers.max(1), value: m.value_options(), ..Default::default() };
    if let Some(e) = m.eps {
        opts.eps = e;
    }
    let (rows, control, summary) = match m.command {
        Command::ApproxNostate => {
            let r = construct_eps_optimal_nostate(cfg, &eta, &opts)?;
            let s = json!({
                "certificate": r.certificate,
                "n": r.n,
                "truncation": r.truncation,
                "floor": r.floor,
                "monotone": r.monotone,
                "outside_support": r.outside_support,
            });
            (r.table, r.control, s)
        }
        Command::ApproxPointwise => {
            let r = construct_eps_optimal_pointwise(cfg, &eta, &opts)?;
            let s = json!({
                "certificate": r.certificate,
                "k_eps": r.k_eps,
                "m_eps": r.m_eps,
                "nu1": r.nu1,
                "gate": r.gate,
                "gronwall": r.gronwall,
                "nu_floor": r.nu_floor,
                "decreasing": r.decreasing,
            });
            (r.table, r.control, s)
        }
        _ => {
            let r = construct_eps_optimal_combined(cfg, &eta, &opts)?;
            let s = json!({
                "certificate": r.certificate,
                "n_eps": r.n_eps,
                "k_eps": r.k_eps,
                "steps": r.steps,
                "decreasing": r.decreasing,
            });
            (r.table, r.control, s)
        }
    };
    out.csv("sweep.csv", |f| write_sweep_csv(&rows, f))?;
    out.csv("control.csv", |f| write_control_csv(&control, f))?;
    Ok(summary)
}

fn counterexamples(out: &mut Outputs) -> Result<Value> {
    let mut cantor = Vec::new();
    for depth in 1..=8 {
        cantor.push((depth, cantor_counterexample(depth)?));
    }
    out.csv("cantor.csv", |f| {
        writeln!(f, "depth,lhs,rhs,premise_failures,conclusion_holds")?;
        for (d, r) in &cantor {
            writeln!(f, "{d},{},{},{},{}", r.lhs, r.rhs, r.premise_failures.len(), r.conclusion_holds)?;
        }
        Ok(())
    })?;
    let rows = pointwise_delay_counterexample(1.0, 2048);
    out.csv("pointwise_generator.csv", |f| write_counterexample_csv(&rows, f))?;
    let m = epsilon_truncation_time(0.1, 1.0, 0.0, 0.01)?;
    Ok(json!({
        "cantor": { "lhs": cantor[0].1.lhs, "rhs": cantor[0].1.rhs },
        "pointwise_generator": {
            "abs_eta0": rows.last().map(|r| r.abs_eta0),
            "final_minus_one_norm": rows.last().map(|r| r.minus_one_norm),
        },
        "truncation_time": { "rho": 0.1, "u1_sup": 1.0, "u1_at_0": 0.0, "eps": 0.01, "m": m },
    }))
}

fn validate(cfg: &ProblemConfig, out: &mut Outputs) -> Result<Value> {
    let report = validate_config(cfg);
    out.csv("validation.csv", |f| {
        writeln!(f, "check,passed,witness")?;
        for c in report.checks.iter().chain(std::iter::once(&report.approximation_ready)) {
            let w = c.witness.as_deref().unwrap_or("").replace([',', '\n'], ";");
            writeln!(f, "{},{},{}", c.name, c.passed, w)?;
        }
        Ok(())
    })?;
    Ok(json!({ "all_passed": report.all_passed(), "report": report }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.as_str().parse::<Command>().unwrap(), c);
        }
        assert!("nope".parse::<Command>().is_err());
    }

    #[test]
    fn counterexamples_write_both_tables() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run(&ExperimentManifest::new(Command::Counterexamples, dir.path())).unwrap();
        assert!(outcome.artifacts.contains(&"cantor.csv".to_string()));
        let cantor = fs::read_to_string(dir.path().join("cantor.csv")).unwrap();
        assert!(cantor.lines().nth(1).unwrap().starts_with("1,-1,0,"));
        assert!(dir.path().join("pointwise_generator.csv").exists());
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn missing_config_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = run(&ExperimentManifest::new(Command::Validate, dir.path())).unwrap_err();
        assert_eq!(error_record(&e)["error"], "InvalidConfig");
    }

    #[test]
    fn simulate_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            let mut m = ExperimentManifest::new(Command::Simulate, d.path()).with_preset("saturating-production");
            m.consumption = 0.1;
            m.horizon = Some(3.0);
            run(&m).unwrap();
        }
        let x = fs::read(a.path().join("trajectory.csv")).unwrap();
        let y = fs::read(b.path().join("trajectory.csv")).unwrap();
        assert_eq!(x, y);
    }
}
