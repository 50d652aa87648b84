//! Verifiers that avoid the costate machinery entirely: central finite
//! differences of the forward dynamics and brute-force grid search.
//!
//! Every integration here runs the forward RK5 kernel with four times the
//! substeps of the settings it is handed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::costs::CostKind;
use crate::dynamics::{
    AugmentedState, ControlProtocol, DEFAULT_SAMPLES_PER_INTERVAL, IntegratorSettings,
    ProblemSpec, Propagator, check_inputs, evolve_forward_with,
};
use crate::error::{Result, invalid_argument};
use crate::optimizer::Evaluator;
use crate::spin::{SpinOperators, coherent_x_state};
use crate::state::{StateVector, norm_sqr};

/// Substep multiplier applied to every oracle integration.
pub const REFINEMENT: usize = 4;
pub const DEFAULT_OMEGA_DELTA: f64 = 1e-4;
pub const DEFAULT_CONTROL_DELTA: f64 = 1e-6;
/// Largest grid [`exhaustive_small_search`] will evaluate.
pub const MAX_GRID_POINTS: usize = 1_000_000;

fn evolve_psi0(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    settings: &IntegratorSettings,
) -> Result<StateVector> {
    check_inputs(spec, control, spec.dim(), 1)?;
    let ops = SpinOperators::new(spec.n_spins)?;
    let refined = settings.refined(REFINEMENT);
    let prop = Propagator::new(&ops, spec, control, &refined, 1);
    let init = coherent_x_state(spec.n_spins)?;
    Ok(StateVector(prop.forward_state(control, init.0)))
}

/// `[ψ0(T; ω+δ) - ψ0(T; ω-δ)] / (2δ)`, evolving the physical state only.
pub fn fd_parameter_derivative(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    delta: f64,
) -> Result<StateVector> {
    fd_parameter_derivative_with(spec, control, delta, &IntegratorSettings::default())
}

pub fn fd_parameter_derivative_with(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    delta: f64,
    settings: &IntegratorSettings,
) -> Result<StateVector> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid_argument("delta must be positive"));
    }
    let plus = evolve_psi0(&spec.with_omega(spec.omega + delta), control, settings)?;
    let minus = evolve_psi0(&spec.with_omega(spec.omega - delta), control, settings)?;
    Ok(StateVector(
        plus.iter()
            .zip(minus.iter())
            .map(|(p, m)| (p - m) / (2.0 * delta))
            .collect(),
    ))
}

fn cost_evaluator(spec: &ProblemSpec, cost: &CostKind, settings: &IntegratorSettings) -> Result<Evaluator> {
    Evaluator::new(spec, cost, settings.refined(REFINEMENT), 1)
}

fn phase_of(cost: &CostKind) -> f64 {
    match cost {
        CostKind::Cfi { phase } => *phase,
        _ => 0.0,
    }
}

fn fd_with(eval: &Evaluator, control: &ControlProtocol, phase: f64, index: usize, delta: f64) -> Result<f64> {
    let shifted = |s: f64| -> Result<f64> {
        let mut values = control.values().to_vec();
        values[index] += s;
        let c = ControlProtocol::new(control.t_final(), values)?;
        Ok(eval.evaluate(&c, phase)?.cost)
    };
    Ok((shifted(delta)? - shifted(-delta)?) / (2.0 * delta))
}

/// Central difference of the internal (minimized) cost with respect to
/// `Ω_index`.
pub fn fd_cost_gradient(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    cost: &CostKind,
    index: usize,
    delta: f64,
) -> Result<f64> {
    fd_cost_gradient_with(spec, control, cost, index, delta, &IntegratorSettings::default())
}

pub fn fd_cost_gradient_with(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    cost: &CostKind,
    index: usize,
    delta: f64,
    settings: &IntegratorSettings,
) -> Result<f64> {
    if index >= control.n_intervals() {
        return Err(invalid_argument(format!(
            "index {index} out of range for {} intervals",
            control.n_intervals()
        )));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid_argument("delta must be positive"));
    }
    let eval = cost_evaluator(spec, cost, settings)?;
    fd_with(&eval, control, phase_of(cost), index, delta)
}

/// Control with values drawn uniformly from `±range`, reproducible from
/// `seed`.
pub fn random_control(n_intervals: usize, t_final: f64, range: f64, seed: u64) -> Result<ControlProtocol> {
    if !(range >= 0.0 && range.is_finite()) {
        return Err(invalid_argument("range must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ControlProtocol::new(
        t_final,
        (0..n_intervals).map(|_| rng.gen_range(-range..=range)).collect(),
    )
}

/// Best point of a Cartesian grid of control values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridOptimum {
    pub control: ControlProtocol,
    pub objective: f64,
    pub evaluated: usize,
}

/// Evaluates the objective on every point of `grid^n_intervals` and
/// returns the maximizer (first in lexicographic order on ties).
pub fn exhaustive_small_search(
    spec: &ProblemSpec,
    cost: &CostKind,
    n_intervals: usize,
    grid: &[f64],
) -> Result<GridOptimum> {
    if grid.is_empty() {
        return Err(invalid_argument("grid is empty"));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(invalid_argument("grid values must be finite"));
    }
    if n_intervals == 0 || n_intervals > 3 {
        return Err(invalid_argument("exhaustive search supports 1 to 3 intervals"));
    }
    let total = (grid.len() as u128).pow(n_intervals as u32);
    if total > MAX_GRID_POINTS as u128 {
        return Err(invalid_argument(format!(
            "grid has {total} points, limit is {MAX_GRID_POINTS}"
        )));
    }
    let eval = cost_evaluator(spec, cost, &IntegratorSettings::default())?;
    let phase = phase_of(cost);
    let mut best: Option<GridOptimum> = None;
    let mut idx = vec![0usize; n_intervals];
    for _ in 0..total {
        let values = idx.iter().map(|&k| grid[k]).collect();
        let control = ControlProtocol::new(spec.t_final, values)?;
        let objective = eval.evaluate(&control, phase)?.objective;
        if best.as_ref().map_or(true, |b| objective > b.objective) {
            best = Some(GridOptimum {
                control,
                objective,
                evaluated: 0,
            });
        }
        for k in (0..n_intervals).rev() {
            idx[k] += 1;
            if idx[k] < grid.len() {
                break;
            }
            idx[k] = 0;
        }
    }
    let mut best = best.expect("grid is non-empty");
    best.evaluated = total as usize;
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IndexCheck {
    pub index: usize,
    /// `∫_{I_i} Φ dt` from the costate sweep.
    pub phi_integral: f64,
    /// Central difference of the cost.
    pub finite_difference: f64,
    /// `|fd - c·Φ| / max|fd|` with `c` the fitted constant.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheckReport {
    pub cost: String,
    pub n_spins: usize,
    pub chi: f64,
    pub t_final: f64,
    pub n_intervals: usize,
    pub control_delta: f64,
    pub omega_delta: f64,
    /// `‖ψ1(T) - fd‖ / ‖fd‖`.
    pub psi1_relative_error: f64,
    pub psi1_pass: bool,
    pub indices: Vec<IndexCheck>,
    pub max_relative_error: f64,
    /// Least-squares constant `c` in `fd ≈ c·∫Φ`; 2 for a correct costate.
    pub proportionality_constant: f64,
    /// Largest `|fd_i/∫Φ_i - c| / |c|` over indices with non-negligible `Φ`.
    pub proportionality_spread: f64,
    pub proportionality_pass: bool,
    pub gradient_pass: bool,
    /// Richardson estimate `4/3·max|fd(δ) - fd(δ/2)|` of the truncation error.
    pub truncation_estimate: f64,
    /// Rounding error model `ε·|C|·√steps/δ`, a random walk over RK steps.
    pub rounding_estimate: f64,
    pub truncation_dominated: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckSettings {
    pub control_delta: f64,
    pub omega_delta: f64,
    pub integrator: IntegratorSettings,
    pub psi1_tol: f64,
    pub gradient_tol: f64,
    pub spread_tol: f64,
    /// Flip the costate sign before the check. Test hook.
    pub corrupt_costate: bool,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            control_delta: DEFAULT_CONTROL_DELTA,
            omega_delta: DEFAULT_OMEGA_DELTA,
            integrator: IntegratorSettings::default(),
            psi1_tol: 1e-6,
            gradient_tol: 1e-4,
            spread_tol: 1e-3,
            corrupt_costate: false,
        }
    }
}

/// Compares the costate gradient at `control` with finite differences and
/// checks `ψ1(T)` against the ω-difference of `ψ0(T)`.
pub fn check_gradients(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    cost: &CostKind,
    settings: &CheckSettings,
) -> Result<GradientCheckReport> {
    let delta = settings.control_delta;
    if !(delta > 0.0 && delta.is_finite()) || !(settings.omega_delta > 0.0) {
        return Err(invalid_argument("finite-difference steps must be positive"));
    }
    let phase = phase_of(cost);

    let fwd = evolve_forward_with(
        spec,
        control,
        &AugmentedState::initial(spec.n_spins)?,
        DEFAULT_SAMPLES_PER_INTERVAL,
        &settings.integrator,
    )?;
    let fd_psi1 = fd_parameter_derivative_with(spec, control, settings.omega_delta, &settings.integrator)?;
    let diff: Vec<_> = fwd
        .last()
        .psi1
        .iter()
        .zip(fd_psi1.iter())
        .map(|(a, b)| a - b)
        .collect();
    let psi1_relative_error = (norm_sqr(&diff) / norm_sqr(&fd_psi1).max(f64::MIN_POSITIVE)).sqrt();

    let adjoint = Evaluator::new(spec, cost, settings.integrator, DEFAULT_SAMPLES_PER_INTERVAL)?
        .with_flipped_costate(settings.corrupt_costate);
    let phi_integrals = adjoint.gradient(control, phase)?.phi_integrals;

    let oracle = cost_evaluator(spec, cost, &settings.integrator)?;
    let base_cost = oracle.evaluate(control, phase)?.cost;
    let mut fd = Vec::with_capacity(control.n_intervals());
    let mut fd_half = Vec::with_capacity(control.n_intervals());
    for i in 0..control.n_intervals() {
        fd.push(fd_with(&oracle, control, phase, i, delta)?);
        fd_half.push(fd_with(&oracle, control, phase, i, 0.5 * delta)?);
    }

    let gg: f64 = phi_integrals.iter().map(|g| g * g).sum();
    let fg: f64 = phi_integrals.iter().zip(&fd).map(|(g, f)| g * f).sum();
    let constant = if gg > 0.0 { fg / gg } else { 0.0 };
    let fd_scale = fd.iter().fold(0.0f64, |m, f| m.max(f.abs()));
    let g_scale = phi_integrals.iter().fold(0.0f64, |m, g| m.max(g.abs()));

    let indices: Vec<IndexCheck> = (0..fd.len())
        .map(|i| IndexCheck {
            index: i,
            phi_integral: phi_integrals[i],
            finite_difference: fd[i],
            relative_error: if fd_scale > 0.0 {
                (fd[i] - 2.0 * phi_integrals[i]).abs() / fd_scale
            } else {
                (2.0 * phi_integrals[i]).abs()
            },
        })
        .collect();
    let max_relative_error = indices.iter().fold(0.0f64, |m, c| m.max(c.relative_error));

    let proportionality_spread = if constant != 0.0 {
        phi_integrals
            .iter()
            .zip(&fd)
            .filter(|(g, _)| g.abs() > 1e-3 * g_scale)
            .map(|(g, f)| ((f / g) - constant).abs() / constant.abs())
            .fold(0.0f64, f64::max)
    } else {
        f64::INFINITY
    };

    let truncation_estimate = fd
        .iter()
        .zip(&fd_half)
        .map(|(a, b)| (a - b).abs() * 4.0 / 3.0)
        .fold(0.0f64, f64::max);
    let steps = oracle.total_steps(control) as f64;
    let rounding_estimate = f64::EPSILON * base_cost.abs().max(1.0) * steps.sqrt() / delta;
    let truncation_dominated = truncation_estimate > 10.0 * rounding_estimate;

    // A zero-gradient instance is trivially proportional.
    let degenerate = fd_scale <= 1e-10 && g_scale <= 1e-10;
    let proportionality_pass =
        degenerate || (constant > 0.0 && proportionality_spread <= settings.spread_tol);
    let gradient_pass = max_relative_error <= settings.gradient_tol;
    let psi1_pass = psi1_relative_error <= settings.psi1_tol;
    Ok(GradientCheckReport {
        cost: cost.name().to_string(),
        n_spins: spec.n_spins,
        chi: spec.chi,
        t_final: spec.t_final,
        n_intervals: control.n_intervals(),
        control_delta: delta,
        omega_delta: settings.omega_delta,
        psi1_relative_error,
        psi1_pass,
        indices,
        max_relative_error,
        proportionality_constant: constant,
        proportionality_spread,
        proportionality_pass,
        gradient_pass,
        truncation_estimate,
        rounding_estimate,
        truncation_dominated,
        passed: psi1_pass && proportionality_pass && gradient_pass && !truncation_dominated,
    })
}
