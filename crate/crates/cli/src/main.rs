use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use pmpm_cli::commands::{self, CliError, EXIT_CONFIG, EXIT_OK, EXIT_STALLED, EXIT_VERIFY_FAILED, SweepAxis};
use pmpm_cli::config::{ConfigError, KEYS, OUTPUT_DIR_ENV, RawConfig, RunConfig};

fn keyed(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value configuration file"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*help))
    })
}

fn cli() -> Command {
    Command::new("pmpm")
        .about("Optimal control of collective-spin Fisher information")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .args_override_self(true)
        .subcommand(keyed(Command::new("run").about("Optimize one configuration")))
        .subcommand(
            keyed(Command::new("sweep").about("Optimize once per value of one axis"))
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .required(true)
                        .value_name("t_final|u_max|n_intervals"),
                )
                .arg(
                    Arg::new("values")
                        .long("values")
                        .required(true)
                        .value_name("V1,V2,..")
                        .help("comma-separated values; `none` lifts the bound on the u_max axis"),
                ),
        )
        .subcommand(keyed(
            Command::new("verify").about("Check costate gradients against finite differences"),
        ))
        .subcommand(
            Command::new("rescale")
                .about("Rewrite a control.csv in dimensionless time s = Nχt")
                .arg(Arg::new("control").long("control").required(true).value_name("FILE"))
                .arg(Arg::new("n_spins").long("n_spins").required(true).value_name("N"))
                .arg(Arg::new("chi").long("chi").required(true).value_name("CHI"))
                .arg(
                    Arg::new("output")
                        .long("output")
                        .value_name("FILE")
                        .help("write here instead of stdout"),
                ),
        )
}

fn raw_config(m: &ArgMatches) -> Result<RawConfig, ConfigError> {
    let mut raw = match m.get_one::<String>("config") {
        Some(path) => RawConfig::load(&PathBuf::from(path))?,
        None => RawConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            raw.set(key, v)?;
        }
    }
    Ok(raw)
}

fn env_output_dir() -> Option<String> {
    std::env::var(OUTPUT_DIR_ENV).ok()
}

fn dispatch(m: &ArgMatches) -> Result<i32, CliError> {
    let env = env_output_dir();
    match m.subcommand() {
        Some(("run", m)) => {
            let cfg = RunConfig::resolve(&raw_config(m)?, env.as_deref())?;
            let r = commands::run(&cfg)?;
            println!(
                "objective={} phi_sd={:.3e} status={} iterations={} output={}",
                r.objective,
                r.diagnostics.phi_sd,
                r.status.as_str(),
                r.iterations,
                cfg.output_dir.display()
            );
            Ok(commands::exit_code_for(r.status))
        }
        Some(("sweep", m)) => {
            let raw = raw_config(m)?;
            let axis = SweepAxis::parse(m.get_one::<String>("axis").expect("required"))?;
            let values: Vec<String> = m
                .get_one::<String>("values")
                .expect("required")
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            let out = commands::sweep(&raw, env.as_deref(), axis, &values)?;
            for (v, r) in values.iter().zip(&out.results) {
                println!(
                    "{}={} objective={} phi_sd={:.3e} status={}",
                    axis.key(),
                    v,
                    r.objective,
                    r.diagnostics.phi_sd,
                    r.status.as_str()
                );
            }
            Ok(if out.any_stalled { EXIT_STALLED } else { EXIT_OK })
        }
        Some(("verify", m)) => {
            let cfg = RunConfig::resolve(&raw_config(m)?, env.as_deref())?;
            let r = commands::verify(&cfg)?;
            println!(
                "psi1_relative_error={:.3e} max_relative_error={:.3e} constant={} spread={:.3e} truncation_dominated={} passed={}",
                r.psi1_relative_error,
                r.max_relative_error,
                r.proportionality_constant,
                r.proportionality_spread,
                r.truncation_dominated,
                r.passed
            );
            Ok(if r.passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
        }
        Some(("rescale", m)) => {
            let parse_err = |k: &str, v: &str| ConfigError::new(k, format!("cannot parse `{v}`"));
            let n = m.get_one::<String>("n_spins").expect("required");
            let n: usize = n.parse().map_err(|_| parse_err("n_spins", n))?;
            let chi = m.get_one::<String>("chi").expect("required");
            let chi: f64 = chi.parse().map_err(|_| parse_err("chi", chi))?;
            let control = PathBuf::from(m.get_one::<String>("control").expect("required"));
            let text = commands::rescale(&control, n, chi)?;
            match m.get_one::<String>("output") {
                Some(out) => {
                    let out = PathBuf::from(out);
                    std::fs::write(&out, text).map_err(|e| CliError::Io(out.clone(), e))?;
                }
                None => print!("{text}"),
            }
            Ok(EXIT_OK)
        }
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { EXIT_OK as u8 });
        }
    };
    match dispatch(&matches) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG as u8)
        }
    }
}
