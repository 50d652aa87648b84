//! Flat `key = value` run configuration.
//!
//! Every key may also be given on the command line as `--key value`; flags
//! override the file. Unknown keys, duplicate keys and unparsable values are
//! rejected with a message naming the key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use pmpm::optimizer::StepRule;
use pmpm::spin::hl_state;
use pmpm::{Complex64, CostKind, IntegratorSettings, OptimizerOptions, ProblemSpec, StateVector};
use serde_json::{Value, json};

pub const OUTPUT_DIR_ENV: &str = "PMPM_OUTPUT_DIR";

/// Every recognized key with a one-line description. Command-line flags are
/// generated from this table.
pub const KEYS: &[(&str, &str)] = &[
    ("n_spins", "number of spins N (default 10)"),
    ("chi", "twist strength χ (default 4)"),
    ("omega", "estimand value ω the derivative is taken at (default 0)"),
    ("t_final", "evolution time T (default 1)"),
    ("n_intervals", "piecewise-constant control intervals N_t (default 64)"),
    ("cost", "qfi | cfi | fidelity (default qfi)"),
    ("u_max", "control bound, or none (default none)"),
    ("target", "fidelity target: hl or a file of `re,im` lines"),
    ("phase_init", "initial CFI phase offset φ (default 0)"),
    ("phase_restart", "CFI: also start from φ+π/4 and φ+π/2 (default true)"),
    ("seed", "seed for random restarts and verify controls (default 0)"),
    ("restarts", "extra random starts (default 0)"),
    ("init_value", "constant start value of Ω (default 1)"),
    ("init_range", "random starts draw Ω uniformly from ±init_range (default 2)"),
    ("step_rule", "bb | doubling (default bb)"),
    ("initial_step", "first trial step, or auto (default auto)"),
    ("armijo_c1", "sufficient-decrease constant (default 1e-4)"),
    ("shrink", "backtracking factor (default 0.5)"),
    ("grow", "factor on the previous accepted step (default 2)"),
    ("min_step", "stall threshold on the step (default 1e-14)"),
    ("substeps", "RK5 substeps per interval, or auto (default auto)"),
    ("step_scale", "auto substep length is step_scale/(1+Nχ) (default 0.002)"),
    ("control_scale", "auto substeps also keep h·max|Ω|·N/2 ≤ control_scale (default 0.1)"),
    ("min_substeps", "lower bound for auto substeps (default 16)"),
    ("samples_per_interval", "diagnostic samples per interval (default 8)"),
    ("tol_phi_sd", "stop when Φ_sd falls below this (default 1e-3, 1e-2 for cfi)"),
    ("max_iters", "iteration limit per start (default 2000)"),
    ("stall_window", "iterations compared for the stationarity test (default 50)"),
    ("stall_rel_tol", "relative improvement threshold (default 1e-10)"),
    ("cfi_clamp", "probability floor in CFI denominators (default 1e-10)"),
    ("fd_delta", "verify: control finite-difference step (default 1e-6)"),
    ("fd_omega_delta", "verify: ω finite-difference step (default 1e-4)"),
    ("corrupt_costate", "verify: negate the costate boundary, test hook (default false)"),
    ("output_dir", "artifact directory (falls back to $PMPM_OUTPUT_DIR)"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostName {
    Qfi,
    Cfi,
    Fidelity,
}

impl CostName {
    pub fn as_str(&self) -> &'static str {
        match self {
            CostName::Qfi => "qfi",
            CostName::Cfi => "cfi",
            CostName::Fidelity => "fidelity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Hl,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_spins: usize,
    pub chi: f64,
    pub omega: f64,
    pub t_final: f64,
    pub n_intervals: usize,
    pub cost: CostName,
    pub u_max: Option<f64>,
    pub target: Option<Target>,
    pub phase_init: f64,
    pub phase_restart: bool,
    pub seed: u64,
    pub restarts: usize,
    pub init_value: f64,
    pub init_range: f64,
    pub step_rule: StepRule,
    pub initial_step: Option<f64>,
    pub armijo_c1: f64,
    pub shrink: f64,
    pub grow: f64,
    pub min_step: f64,
    pub substeps: Option<usize>,
    pub step_scale: f64,
    pub control_scale: f64,
    pub min_substeps: usize,
    pub samples_per_interval: usize,
    pub tol_phi_sd: f64,
    pub max_iters: usize,
    pub stall_window: usize,
    pub stall_rel_tol: f64,
    pub cfi_clamp: f64,
    pub fd_delta: f64,
    pub fd_omega_delta: f64,
    pub corrupt_costate: bool,
    pub output_dir: PathBuf,
}

/// Raw `key → value` pairs, file first, overrides applied on top.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig(pub BTreeMap<String, String>);

impl RawConfig {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::new(
                    line,
                    format!("line {}: expected `key = value`", lineno + 1),
                ));
            };
            let (k, v) = (k.trim(), v.trim());
            check_known(k)?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::new(k, "given more than once"));
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        check_known(key)?;
        self.0.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

fn check_known(key: &str) -> Result<(), ConfigError> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(ConfigError::new(key, "unknown key"))
    }
}

fn parse<T: std::str::FromStr>(raw: &RawConfig, key: &str, default: T) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    match raw.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|e| ConfigError::new(key, format!("cannot parse `{v}`: {e}"))),
    }
}

fn finite(raw: &RawConfig, key: &str, default: f64) -> Result<f64, ConfigError> {
    let v: f64 = parse(raw, key, default)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::new(key, "must be finite"))
    }
}

fn positive(raw: &RawConfig, key: &str, default: f64) -> Result<f64, ConfigError> {
    let v = finite(raw, key, default)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(ConfigError::new(key, "must be positive"))
    }
}

fn at_least(raw: &RawConfig, key: &str, default: usize, min: usize) -> Result<usize, ConfigError> {
    let v: usize = parse(raw, key, default)?;
    if v >= min {
        Ok(v)
    } else {
        Err(ConfigError::new(key, format!("must be at least {min}")))
    }
}

fn optional_positive(raw: &RawConfig, key: &str, none: &[&str]) -> Result<Option<f64>, ConfigError> {
    match raw.get(key) {
        None => Ok(None),
        Some(v) if none.contains(&v.to_ascii_lowercase().as_str()) => Ok(None),
        Some(_) => positive(raw, key, 0.0).map(Some),
    }
}

impl RunConfig {
    /// Resolves a raw config. `output_dir` falls back to `env_output_dir`.
    pub fn resolve(raw: &RawConfig, env_output_dir: Option<&str>) -> Result<Self, ConfigError> {
        let cost = match raw.get("cost").unwrap_or("qfi").to_ascii_lowercase().as_str() {
            "qfi" => CostName::Qfi,
            "cfi" => CostName::Cfi,
            "fidelity" => CostName::Fidelity,
            other => {
                return Err(ConfigError::new(
                    "cost",
                    format!("expected qfi, cfi or fidelity, got `{other}`"),
                ));
            }
        };
        let target = match raw.get("target") {
            None => None,
            Some(v) if v.eq_ignore_ascii_case("hl") => Some(Target::Hl),
            Some(v) => Some(Target::File(PathBuf::from(v))),
        };
        if cost == CostName::Fidelity && target.is_none() {
            return Err(ConfigError::new("target", "required when cost = fidelity"));
        }
        let step_rule = match raw.get("step_rule").unwrap_or("bb").to_ascii_lowercase().as_str() {
            "bb" => StepRule::BarzilaiBorwein,
            "doubling" => StepRule::Doubling,
            other => {
                return Err(ConfigError::new(
                    "step_rule",
                    format!("expected bb or doubling, got `{other}`"),
                ));
            }
        };
        let substeps = match raw.get("substeps") {
            None => None,
            Some(v) if v.eq_ignore_ascii_case("auto") => None,
            Some(_) => Some(at_least(raw, "substeps", 1, 1)?),
        };
        let output_dir = match raw.get("output_dir").or(env_output_dir) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => {
                return Err(ConfigError::new(
                    "output_dir",
                    format!("not set and ${OUTPUT_DIR_ENV} is empty"),
                ));
            }
        };
        let default_tol = if cost == CostName::Cfi { 1e-2 } else { 1e-3 };

        let cfg = Self {
            n_spins: at_least(raw, "n_spins", 10, 1)?,
            chi: finite(raw, "chi", 4.0)?,
            omega: finite(raw, "omega", 0.0)?,
            t_final: positive(raw, "t_final", 1.0)?,
            n_intervals: at_least(raw, "n_intervals", 64, 1)?,
            cost,
            u_max: optional_positive(raw, "u_max", &["none", "inf"])?,
            target,
            phase_init: finite(raw, "phase_init", 0.0)?,
            phase_restart: parse(raw, "phase_restart", true)?,
            seed: parse(raw, "seed", 0)?,
            restarts: parse(raw, "restarts", 0)?,
            init_value: finite(raw, "init_value", 1.0)?,
            init_range: finite(raw, "init_range", 2.0)?,
            step_rule,
            initial_step: optional_positive(raw, "initial_step", &["auto"])?,
            armijo_c1: positive(raw, "armijo_c1", 1e-4)?,
            shrink: positive(raw, "shrink", 0.5)?,
            grow: positive(raw, "grow", 2.0)?,
            min_step: positive(raw, "min_step", 1e-14)?,
            substeps,
            step_scale: positive(raw, "step_scale", 0.002)?,
            control_scale: positive(raw, "control_scale", 0.1)?,
            min_substeps: at_least(raw, "min_substeps", 16, 1)?,
            samples_per_interval: at_least(raw, "samples_per_interval", 8, 1)?,
            tol_phi_sd: positive(raw, "tol_phi_sd", default_tol)?,
            max_iters: at_least(raw, "max_iters", 2000, 1)?,
            stall_window: at_least(raw, "stall_window", 50, 1)?,
            stall_rel_tol: positive(raw, "stall_rel_tol", 1e-10)?,
            cfi_clamp: positive(raw, "cfi_clamp", 1e-10)?,
            fd_delta: positive(raw, "fd_delta", 1e-6)?,
            fd_omega_delta: positive(raw, "fd_omega_delta", 1e-4)?,
            corrupt_costate: parse(raw, "corrupt_costate", false)?,
            output_dir,
        };
        if cfg.armijo_c1 >= 1.0 {
            return Err(ConfigError::new("armijo_c1", "must be below 1"));
        }
        if cfg.shrink >= 1.0 {
            return Err(ConfigError::new("shrink", "must be below 1"));
        }
        if cfg.grow < 1.0 {
            return Err(ConfigError::new("grow", "must be at least 1"));
        }
        if cfg.init_range < 0.0 {
            return Err(ConfigError::new("init_range", "must be non-negative"));
        }
        Ok(cfg)
    }

    pub fn spec(&self) -> Result<ProblemSpec, ConfigError> {
        let spec = ProblemSpec::new(self.n_spins, self.chi, self.t_final)
            .map_err(|e| ConfigError::new("n_spins", e.to_string()))?
            .with_omega(self.omega);
        spec.with_u_max(self.u_max)
            .map_err(|e| ConfigError::new("u_max", e.to_string()))
    }

    pub fn cost_kind(&self) -> Result<CostKind, ConfigError> {
        Ok(match self.cost {
            CostName::Qfi => CostKind::Qfi,
            CostName::Cfi => CostKind::cfi(self.phase_init),
            CostName::Fidelity => CostKind::Fidelity {
                target: self.load_target()?,
            },
        })
    }

    fn load_target(&self) -> Result<StateVector, ConfigError> {
        let err = |m: String| ConfigError::new("target", m);
        let state = match &self.target {
            None => return Err(err("required when cost = fidelity".into())),
            Some(Target::Hl) => hl_state(self.n_spins).map_err(|e| err(e.to_string()))?,
            Some(Target::File(path)) => read_state(path).map_err(err)?,
        };
        if state.dim() != self.n_spins + 1 {
            return Err(err(format!(
                "target has {} amplitudes, expected {}",
                state.dim(),
                self.n_spins + 1
            )));
        }
        if (state.norm() - 1.0).abs() > 1e-8 {
            return Err(err(format!("target norm is {}, expected 1", state.norm())));
        }
        Ok(state)
    }

    pub fn integrator(&self) -> IntegratorSettings {
        IntegratorSettings {
            substeps: self.substeps,
            step_scale: self.step_scale,
            control_scale: self.control_scale,
            min_substeps: self.min_substeps,
        }
    }

    pub fn optimizer_options(&self) -> OptimizerOptions {
        OptimizerOptions {
            n_intervals: self.n_intervals,
            max_iters: self.max_iters,
            tol_phi_sd: self.tol_phi_sd,
            armijo_c1: self.armijo_c1,
            shrink: self.shrink,
            grow: self.grow,
            step_rule: self.step_rule,
            initial_step: self.initial_step,
            min_step: self.min_step,
            stall_window: self.stall_window,
            stall_rel_tol: self.stall_rel_tol,
            init_value: self.init_value,
            restarts: self.restarts,
            init_range: self.init_range,
            seed: self.seed,
            initial_control: None,
            phase_restart: self.phase_restart,
            samples_per_interval: self.samples_per_interval,
            integrator: self.integrator(),
            cfi_clamp: self.cfi_clamp,
        }
    }

    /// Every resolved setting, keyed like the config file.
    pub fn echo(&self) -> BTreeMap<&'static str, Value> {
        let opt = |v: Option<f64>| v.map_or(Value::Null, |x| json!(x));
        let mut m = BTreeMap::new();
        m.insert("n_spins", json!(self.n_spins));
        m.insert("chi", json!(self.chi));
        m.insert("omega", json!(self.omega));
        m.insert("t_final", json!(self.t_final));
        m.insert("n_intervals", json!(self.n_intervals));
        m.insert("cost", json!(self.cost.as_str()));
        m.insert("u_max", opt(self.u_max));
        m.insert(
            "target",
            match &self.target {
                None => Value::Null,
                Some(Target::Hl) => json!("hl"),
                Some(Target::File(p)) => json!(p.display().to_string()),
            },
        );
        m.insert("phase_init", json!(self.phase_init));
        m.insert("phase_restart", json!(self.phase_restart));
        m.insert("seed", json!(self.seed));
        m.insert("restarts", json!(self.restarts));
        m.insert("init_value", json!(self.init_value));
        m.insert("init_range", json!(self.init_range));
        m.insert("step_rule", json!(self.step_rule.as_str()));
        m.insert("initial_step", opt(self.initial_step));
        m.insert("armijo_c1", json!(self.armijo_c1));
        m.insert("shrink", json!(self.shrink));
        m.insert("grow", json!(self.grow));
        m.insert("min_step", json!(self.min_step));
        m.insert("substeps", self.substeps.map_or(Value::Null, |s| json!(s)));
        m.insert("step_scale", json!(self.step_scale));
        m.insert("control_scale", json!(self.control_scale));
        m.insert("min_substeps", json!(self.min_substeps));
        m.insert("samples_per_interval", json!(self.samples_per_interval));
        m.insert("tol_phi_sd", json!(self.tol_phi_sd));
        m.insert("max_iters", json!(self.max_iters));
        m.insert("stall_window", json!(self.stall_window));
        m.insert("stall_rel_tol", json!(self.stall_rel_tol));
        m.insert("cfi_clamp", json!(self.cfi_clamp));
        m.insert("fd_delta", json!(self.fd_delta));
        m.insert("fd_omega_delta", json!(self.fd_omega_delta));
        m.insert("corrupt_costate", json!(self.corrupt_costate));
        m.insert("output_dir", json!(self.output_dir.display().to_string()));
        m
    }
}

/// Reads a state from lines of `re,im` (or whitespace separated) pairs.
pub fn read_state(path: &Path) -> Result<StateVector, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut amps = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("{}:{}: bad number `{s}`", path.display(), i + 1))
        };
        match parts.as_slice() {
            [re] => amps.push(Complex64::new(num(re)?, 0.0)),
            [re, im] => amps.push(Complex64::new(num(re)?, num(im)?)),
            _ => return Err(format!("{}:{}: expected `re,im`", path.display(), i + 1)),
        }
    }
    Ok(StateVector(amps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str) -> RawConfig {
        RawConfig::parse_str(text).unwrap()
    }

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::resolve(&raw("output_dir = out"), None).unwrap();
        assert_eq!(c.n_spins, 10);
        assert_eq!(c.cost, CostName::Qfi);
        assert_eq!(c.tol_phi_sd, 1e-3);
        assert_eq!(c.u_max, None);
        let c = RunConfig::resolve(&raw("cost = cfi\noutput_dir=o"), None).unwrap();
        assert_eq!(c.tol_phi_sd, 1e-2);
    }

    #[test]
    fn comments_and_blank_lines() {
        let r = raw("# header\n\nn_spins = 4  # trailing\nchi=1\n");
        assert_eq!(r.0.get("n_spins").unwrap(), "4");
        assert_eq!(r.0.get("chi").unwrap(), "1");
    }

    #[test]
    fn errors_name_the_key() {
        let e = RawConfig::parse_str("n_spin = 4").unwrap_err();
        assert_eq!(e.key, "n_spin");
        let e = RawConfig::parse_str("chi = 1\nchi = 2").unwrap_err();
        assert_eq!(e.key, "chi");
        let e = RunConfig::resolve(&raw("chi = abc\noutput_dir=o"), None).unwrap_err();
        assert_eq!(e.key, "chi");
        let e = RunConfig::resolve(&raw("t_final = -1\noutput_dir=o"), None).unwrap_err();
        assert_eq!(e.key, "t_final");
        let e = RunConfig::resolve(&raw("chi = nan\noutput_dir=o"), None).unwrap_err();
        assert_eq!(e.key, "chi");
        let e = RunConfig::resolve(&raw("cost = fidelity\noutput_dir=o"), None).unwrap_err();
        assert_eq!(e.key, "target");
        let e = RunConfig::resolve(&raw("n_spins = 0\noutput_dir=o"), None).unwrap_err();
        assert_eq!(e.key, "n_spins");
        let e = RunConfig::resolve(&raw(""), None).unwrap_err();
        assert_eq!(e.key, "output_dir");
        assert!(e.to_string().contains("output_dir"));
    }

    #[test]
    fn env_output_dir_is_fallback() {
        let c = RunConfig::resolve(&raw(""), Some("/tmp/x")).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
        let c = RunConfig::resolve(&raw("output_dir = here"), Some("/tmp/x")).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("here"));
    }

    #[test]
    fn u_max_none_and_value() {
        let c = RunConfig::resolve(&raw("u_max = none\noutput_dir=o"), None).unwrap();
        assert_eq!(c.u_max, None);
        let c = RunConfig::resolve(&raw("u_max = 4\noutput_dir=o"), None).unwrap();
        assert_eq!(c.u_max, Some(4.0));
        assert_eq!(c.spec().unwrap().u_max, Some(4.0));
        let e = RunConfig::resolve(&raw("u_max = 0\noutput_dir=o"), None).unwrap_err();
        assert_eq!(e.key, "u_max");
    }

    #[test]
    fn overrides_win() {
        let mut r = raw("n_spins = 4\noutput_dir=o");
        r.set("n_spins", "6").unwrap();
        assert_eq!(RunConfig::resolve(&r, None).unwrap().n_spins, 6);
        assert!(r.set("bogus", "1").is_err());
    }

    #[test]
    fn echo_lists_every_key() {
        let c = RunConfig::resolve(&raw("output_dir = o"), None).unwrap();
        let echo = c.echo();
        for (k, _) in KEYS {
            assert!(echo.contains_key(k), "{k} missing from echo");
        }
        assert_eq!(echo.len(), KEYS.len());
    }

    #[test]
    fn hl_target_resolves() {
        let c = RunConfig::resolve(&raw("cost=fidelity\ntarget=hl\nn_spins=4\noutput_dir=o"), None).unwrap();
        match c.cost_kind().unwrap() {
            CostKind::Fidelity { target } => assert_eq!(target.dim(), 5),
            other => panic!("{other:?}"),
        }
    }
}
