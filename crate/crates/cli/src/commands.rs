use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pmpm::optimizer::{dimensionless_rescale, optimize};
use pmpm::oracle::{CheckSettings, GradientCheckReport, check_gradients, random_control};
use pmpm::spin::jx_eigensystem;
use pmpm::{OptimizationResult, Status};

use crate::artifacts::{self, SweepRow, fmt_float};
use crate::config::{ConfigError, RawConfig, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_STALLED: i32 = 2;
pub const EXIT_VERIFY_FAILED: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Io(PathBuf, io::Error),
    Run(pmpm::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<pmpm::Error> for CliError {
    fn from(e: pmpm::Error) -> Self {
        CliError::Run(e)
    }
}

trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T, CliError>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T, CliError> {
        self.map_err(|e| CliError::Io(path.to_path_buf(), e))
    }
}

pub fn exit_code_for(status: Status) -> i32 {
    match status {
        Status::Stalled => EXIT_STALLED,
        _ => EXIT_OK,
    }
}

/// Optimizes one configuration and writes its artifacts into
/// `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<OptimizationResult, CliError> {
    let spec = cfg.spec()?;
    let cost = cfg.cost_kind()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).at(dir)?;

    let started = Instant::now();
    let result = optimize(&spec, &cost, &cfg.optimizer_options())?;
    let wall = started.elapsed().as_secs_f64();

    let p = dir.join(artifacts::CONTROL);
    artifacts::write_control(&p, &result.control).at(&p)?;
    let p = dir.join(artifacts::DIAGNOSTICS);
    artifacts::write_diagnostics(&p, &result.diagnostics).at(&p)?;
    let p = dir.join(artifacts::HISTORY);
    artifacts::write_history(&p, &result).at(&p)?;
    if result.phase.is_some() {
        let eig = jx_eigensystem(cfg.n_spins)?;
        let p = dir.join(artifacts::PROBABILITIES);
        artifacts::write_probabilities(&p, &result, &eig).at(&p)?;
    }
    let p = dir.join(artifacts::SUMMARY);
    artifacts::write_json(&p, &artifacts::summary(cfg, &result, wall)).at(&p)?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TFinal,
    UMax,
    NIntervals,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "t_final" => Ok(SweepAxis::TFinal),
            "u_max" => Ok(SweepAxis::UMax),
            "n_intervals" => Ok(SweepAxis::NIntervals),
            other => Err(ConfigError::new(
                "axis",
                format!("expected t_final, u_max or n_intervals, got `{other}`"),
            )),
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            SweepAxis::TFinal => "t_final",
            SweepAxis::UMax => "u_max",
            SweepAxis::NIntervals => "n_intervals",
        }
    }
}

pub struct SweepOutcome {
    pub results: Vec<OptimizationResult>,
    pub any_stalled: bool,
}

/// Runs `raw` once per value of `axis`, each into its own subdirectory of
/// the base output directory, and writes `sweep.csv` there.
pub fn sweep(
    raw: &RawConfig,
    env_output_dir: Option<&str>,
    axis: SweepAxis,
    values: &[String],
) -> Result<SweepOutcome, CliError> {
    if values.is_empty() {
        return Err(ConfigError::new("values", "at least one sweep value is required").into());
    }
    let base = RunConfig::resolve(raw, env_output_dir)?;
    // Resolve every point before running any of them.
    let mut configs = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        let mut point = raw.clone();
        point.set(axis.key(), v)?;
        let sub = base.output_dir.join(format!("{:03}_{}_{}", i, axis.key(), v.trim()));
        point.set("output_dir", &sub.display().to_string())?;
        let cfg = RunConfig::resolve(&point, None)?;
        let value = match axis {
            SweepAxis::TFinal => cfg.t_final,
            SweepAxis::UMax => cfg.u_max.unwrap_or(f64::INFINITY),
            SweepAxis::NIntervals => cfg.n_intervals as f64,
        };
        configs.push((value, cfg));
    }
    fs::create_dir_all(&base.output_dir).at(&base.output_dir)?;

    let mut rows = Vec::new();
    let mut results = Vec::new();
    for (value, cfg) in &configs {
        let r = run(cfg)?;
        rows.push(SweepRow {
            value: *value,
            objective: r.objective,
            phi_sd: r.diagnostics.phi_sd,
            hc_mean: r.diagnostics.hc_mean(),
        });
        results.push(r);
    }
    let p = base.output_dir.join(artifacts::SWEEP);
    artifacts::write_sweep(&p, &rows).at(&p)?;
    let any_stalled = results.iter().any(|r| r.status == Status::Stalled);
    Ok(SweepOutcome {
        results,
        any_stalled,
    })
}

/// Checks costate gradients and `ψ1` against finite differences at a seeded
/// random control; writes `verify_report.json`.
pub fn verify(cfg: &RunConfig) -> Result<GradientCheckReport, CliError> {
    let spec = cfg.spec()?;
    let cost = cfg.cost_kind()?;
    let control = random_control(cfg.n_intervals, cfg.t_final, cfg.init_range, cfg.seed)?;
    let settings = CheckSettings {
        control_delta: cfg.fd_delta,
        omega_delta: cfg.fd_omega_delta,
        integrator: cfg.integrator(),
        corrupt_costate: cfg.corrupt_costate,
        ..CheckSettings::default()
    };
    let report = check_gradients(&spec, &control, &cost, &settings)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).at(dir)?;
    let p = dir.join(artifacts::VERIFY_REPORT);
    let value = serde_json::to_value(&report).map_err(|e| CliError::Io(p.clone(), io::Error::other(e)))?;
    artifacts::write_json(&p, &value).at(&p)?;
    Ok(report)
}

/// Converts a `control.csv` to dimensionless time `s = Nχt` with values
/// divided by `Nχ`. Output columns: `s_start,s_end,value`.
pub fn rescale(control_path: &Path, n_spins: usize, chi: f64) -> Result<String, CliError> {
    let control = artifacts::read_control(control_path)
        .map_err(|m| ConfigError::new("control", m))?;
    let spec = pmpm::ProblemSpec::new(n_spins, chi, control.t_final())
        .map_err(|e| ConfigError::new("n_spins", e.to_string()))?;
    let r = dimensionless_rescale(&control, &spec).map_err(|e| ConfigError::new("chi", e.to_string()))?;
    let mut out = String::from("s_start,s_end,value\n");
    for i in 0..r.values.len() {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_float(r.edges[i]),
            fmt_float(r.edges[i + 1]),
            fmt_float(r.values[i])
        ));
    }
    Ok(out)
}
