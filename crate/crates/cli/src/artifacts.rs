//! Artifact files. CSV floats use 17 significant digits so every value
//! round-trips exactly.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use pmpm::costs::measurement_distribution;
use pmpm::{ControlProtocol, DiagnosticsSeries, Eigensystem, OptimizationResult};
use serde_json::{Map, Value, json};

use crate::config::RunConfig;

pub const SUMMARY: &str = "summary.json";
pub const CONTROL: &str = "control.csv";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const PROBABILITIES: &str = "probabilities.csv";
pub const HISTORY: &str = "history.csv";
pub const SWEEP: &str = "sweep.csv";
pub const VERIFY_REPORT: &str = "verify_report.json";

/// `{:.16e}`: 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}

pub fn write_control(path: &Path, control: &ControlProtocol) -> io::Result<()> {
    let n = control.n_intervals();
    write_csv(
        path,
        &["interval_start", "interval_end", "omega_value"],
        (0..n).map(|i| {
            let end = if i + 1 == n {
                control.t_final()
            } else {
                control.interval_start(i + 1)
            };
            vec![
                fmt_float(control.interval_start(i)),
                fmt_float(end),
                fmt_float(control.values()[i]),
            ]
        }),
    )
}

pub fn write_diagnostics(path: &Path, d: &DiagnosticsSeries) -> io::Result<()> {
    write_csv(
        path,
        &["t", "phi", "hc"],
        (0..d.times.len()).map(|j| vec![fmt_float(d.times[j]), fmt_float(d.phi[j]), fmt_float(d.hc[j])]),
    )
}

pub fn write_history(path: &Path, r: &OptimizationResult) -> io::Result<()> {
    write_csv(
        path,
        &["iteration", "objective", "phi_sd", "step_size"],
        r.history.iter().map(|h| {
            vec![
                h.iteration.to_string(),
                fmt_float(h.objective),
                fmt_float(h.phi_sd),
                fmt_float(h.step_size),
            ]
        }),
    )
}

/// `m` is the `Jx` eigenvalue of the outcome.
pub fn write_probabilities(path: &Path, r: &OptimizationResult, eig: &Eigensystem) -> io::Result<()> {
    let dist = measurement_distribution(&r.final_state, eig, r.phase.unwrap_or(0.0));
    write_csv(
        path,
        &["m", "P_m", "dP_m"],
        (0..dist.p.len()).map(|k| {
            vec![
                fmt_float(eig.eigenvalues[k].round()),
                fmt_float(dist.p[k]),
                fmt_float(dist.dp_domega[k]),
            ]
        }),
    )
}

pub struct SweepRow {
    pub value: f64,
    pub objective: f64,
    pub phi_sd: f64,
    pub hc_mean: f64,
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> io::Result<()> {
    write_csv(
        path,
        &["value", "objective", "phi_sd", "hc_mean"],
        rows.iter().map(|r| {
            vec![
                fmt_float(r.value),
                fmt_float(r.objective),
                fmt_float(r.phi_sd),
                fmt_float(r.hc_mean),
            ]
        }),
    )
}

pub fn summary(cfg: &RunConfig, r: &OptimizationResult, wall_time: f64) -> Value {
    let d = &r.diagnostics;
    let config: Map<String, Value> = cfg.echo().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    json!({
        "cost": cfg.cost.as_str(),
        "objective": r.objective,
        "phi_mean": d.phi_mean,
        "phi_sd": d.phi_sd,
        "hc_mean": d.hc_mean(),
        "hc_min": d.hc.iter().copied().fold(f64::INFINITY, f64::min),
        "hc_max": d.hc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "phase": r.phase,
        "iterations": r.iterations,
        "status": r.status.as_str(),
        "start_index": r.start_index,
        "wall_time_seconds": wall_time,
        "config": Value::Object(config),
    })
}

pub fn write_json(path: &Path, value: &Value) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Reads a `control.csv` written by [`write_control`]. Intervals must be
/// contiguous, start at zero and have equal length.
pub fn read_control(path: &Path) -> Result<ControlProtocol, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| format!("{}: empty file", path.display()))?;
    if header.trim() != "interval_start,interval_end,omega_value" {
        return Err(format!("{}: unexpected header `{header}`", path.display()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match cells {
            Ok(c) if c.len() == 3 && c.iter().all(|v| v.is_finite()) => rows.push((c[0], c[1], c[2])),
            _ => return Err(format!("{}: bad row {}", path.display(), i + 2)),
        }
    }
    if rows.is_empty() {
        return Err(format!("{}: no intervals", path.display()));
    }
    let t_final = rows[rows.len() - 1].1;
    let dt = t_final / rows.len() as f64;
    for (i, &(a, b, _)) in rows.iter().enumerate() {
        let tol = 1e-9 * t_final.max(1.0);
        if (a - i as f64 * dt).abs() > tol || (b - (i + 1) as f64 * dt).abs() > tol {
            return Err(format!(
                "{}: interval {} is not on a uniform grid from 0 to {t_final}",
                path.display(),
                i
            ));
        }
    }
    ControlProtocol::new(t_final, rows.into_iter().map(|r| r.2).collect()).map_err(|e| e.to_string())
}
