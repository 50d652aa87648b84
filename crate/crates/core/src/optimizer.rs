//! Switching function, control Hamiltonian, and projected gradient descent on
//! piecewise-constant controls.
//!
//! With `π = ∂C/∂⟨ψ(T)|`, the derivative of the cost with respect to the
//! control on interval `i` is `2 ∫_{I_i} Φ(t) dt`. The integral is taken with
//! Simpson's rule over the RK5 substep nodes, where forward and costate
//! states are both available.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costs::{
    CostKind, DEFAULT_CFI_CLAMP, cfi_costate_boundary_clamped, cfi_value_clamped,
    fidelity_costate_boundary, fidelity_value, measurement_distribution, normalize_phase,
    qfi_cost, qfi_costate_boundary,
};
use crate::dynamics::{
    AugmentedState, ControlProtocol, CostatePair, DEFAULT_SAMPLES_PER_INTERVAL, Hamiltonian,
    IntegratorSettings, ProblemSpec, Propagator, SampledTrajectory, check_inputs,
};
use crate::error::{Error, Result, invalid_argument};
use crate::spin::{Eigensystem, SpinOperators, jx_eigensystem};
use crate::state::{StateVector, inner};

/// `Im ⟨a|Jx|b⟩` using the tridiagonal form of `Jx`.
fn im_jx_element(off: &[f64], a: &[Complex64], b: &[Complex64]) -> f64 {
    let mut acc = 0.0;
    for (k, &w) in off.iter().enumerate() {
        acc += w * ((a[k].conj() * b[k + 1]).im + (a[k + 1].conj() * b[k]).im);
    }
    acc
}

/// `Φ = Im(⟨π0|Jx|ψ0⟩ + ⟨π1|Jx|ψ1⟩)` on flat `[x0; x1]` buffers.
fn phi_flat(off: &[f64], costate: &[Complex64], state: &[Complex64]) -> f64 {
    let d = off.len() + 1;
    im_jx_element(off, &costate[..d], &state[..d]) + im_jx_element(off, &costate[d..], &state[d..])
}

/// `H_c = Im(⟨π0|H|ψ0⟩ + ⟨π1|Jz|ψ0⟩ + ⟨π1|H|ψ1⟩)` on flat buffers.
fn hc_flat(ham: &Hamiltonian, jz: &[f64], costate: &[Complex64], state: &[Complex64]) -> f64 {
    let d = jz.len();
    let mut h0 = vec![Complex64::new(0.0, 0.0); d];
    let mut h1 = vec![Complex64::new(0.0, 0.0); d];
    ham.apply(&state[..d], &mut h0);
    ham.apply(&state[d..], &mut h1);
    let (p0, p1) = costate.split_at(d);
    let mut acc = inner(p0, &h0) + inner(p1, &h1);
    for k in 0..d {
        acc += p1[k].conj() * state[k] * jz[k];
    }
    acc.im
}

fn check_grids<A, B>(fwd: &SampledTrajectory<A>, bwd: &SampledTrajectory<B>) -> Result<()> {
    let same = fwd.times.len() == bwd.times.len()
        && fwd.samples_per_interval == bwd.samples_per_interval
        && fwd
            .times
            .iter()
            .zip(&bwd.times)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0));
    if same {
        Ok(())
    } else {
        Err(invalid_argument("forward and costate sample grids differ"))
    }
}

pub fn switching_function(
    fwd: &SampledTrajectory<AugmentedState>,
    bwd: &SampledTrajectory<CostatePair>,
    ops: &SpinOperators,
) -> Result<Vec<f64>> {
    check_grids(fwd, bwd)?;
    let off = ops.jx_offdiag();
    Ok(fwd
        .states
        .iter()
        .zip(&bwd.states)
        .map(|(s, c)| im_jx_element(off, &c.pi0, &s.psi0) + im_jx_element(off, &c.pi1, &s.psi1))
        .collect())
}

/// Control Hamiltonian at each sample, using the control value of the
/// interval the sample belongs to.
pub fn control_hamiltonian(
    fwd: &SampledTrajectory<AugmentedState>,
    bwd: &SampledTrajectory<CostatePair>,
    ops: &SpinOperators,
    spec: &ProblemSpec,
    control: &ControlProtocol,
) -> Result<Vec<f64>> {
    check_grids(fwd, bwd)?;
    if (fwd.times.len() - 1) != control.n_intervals() * fwd.samples_per_interval {
        return Err(invalid_argument("sample grid does not match the control"));
    }
    let hams: Vec<Hamiltonian> = control
        .values()
        .iter()
        .map(|&v| Hamiltonian::new(ops, spec.chi, spec.omega, v))
        .collect();
    Ok((0..fwd.len())
        .map(|j| {
            let s = fwd.states[j].to_flat();
            let c = bwd.states[j].to_flat();
            hc_flat(&hams[fwd.interval_of(j)], ops.jz(), &c, &s)
        })
        .collect())
}

/// Mean `(1/T)∫Φ dt` and RMS `(∫Φ² dt / T)^{1/2}` of samples on a uniform
/// grid over `[0, T]`, by the trapezoid rule.
pub fn phi_statistics(phi: &[f64], t_final: f64) -> Result<(f64, f64)> {
    if phi.len() < 2 {
        return Err(invalid_argument("need at least two samples"));
    }
    if !(t_final > 0.0) {
        return Err(invalid_argument("t_final must be positive"));
    }
    let h = t_final / (phi.len() - 1) as f64;
    let trap = |f: &dyn Fn(f64) -> f64| {
        let inner: f64 = phi[1..phi.len() - 1].iter().map(|&x| f(x)).sum();
        h * (inner + 0.5 * (f(phi[0]) + f(phi[phi.len() - 1])))
    };
    let mean = trap(&|x| x) / t_final;
    let sd = (trap(&|x| x * x) / t_final).sqrt();
    Ok((mean, sd))
}

/// Clamps each value into `[-u_max, u_max]`.
pub fn project_control(values: &[f64], u_max: f64) -> Vec<f64> {
    values.iter().map(|v| v.clamp(-u_max, u_max)).collect()
}

fn project_in_place(values: &mut [f64], u_max: Option<f64>) {
    if let Some(u) = u_max {
        values.iter_mut().for_each(|v| *v = v.clamp(-u, u));
    }
}

/// A control expressed in dimensionless time `s = Nχt` with values `Ω/(Nχ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaledControl {
    /// `N·χ`.
    pub scale: f64,
    /// Interval edges in `s`, `n_intervals + 1` entries.
    pub edges: Vec<f64>,
    pub values: Vec<f64>,
}

impl RescaledControl {
    /// Piecewise-constant value at dimensionless time `s`.
    pub fn value_at(&self, s: f64) -> f64 {
        let n = self.values.len();
        let span = self.edges[n] - self.edges[0];
        let i = (((s - self.edges[0]) / span) * n as f64).floor();
        let i = if i < 0.0 { 0 } else { (i as usize).min(n - 1) };
        self.values[i]
    }
}

pub fn dimensionless_rescale(control: &ControlProtocol, spec: &ProblemSpec) -> Result<RescaledControl> {
    let scale = spec.n_spins as f64 * spec.chi;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid_argument(format!(
            "rescaling needs N·chi > 0, got {scale}"
        )));
    }
    let n = control.n_intervals();
    let edges = (0..=n).map(|i| scale * control.interval_start(i)).collect();
    let values = control.values().iter().map(|v| v / scale).collect();
    Ok(RescaledControl {
        scale,
        edges,
        values,
    })
}

/// Inverse of [`dimensionless_rescale`].
pub fn restore_dimensional(rescaled: &RescaledControl) -> Result<ControlProtocol> {
    let n = rescaled.values.len();
    if n == 0 || rescaled.edges.len() != n + 1 || !(rescaled.scale > 0.0) {
        return Err(invalid_argument("malformed rescaled control"));
    }
    let t_final = (rescaled.edges[n] - rescaled.edges[0]) / rescaled.scale;
    ControlProtocol::new(
        t_final,
        rescaled.values.iter().map(|v| v * rescaled.scale).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSeries {
    pub times: Vec<f64>,
    pub phi: Vec<f64>,
    pub hc: Vec<f64>,
    pub phi_mean: f64,
    pub phi_sd: f64,
}

impl DiagnosticsSeries {
    pub fn new(times: Vec<f64>, phi: Vec<f64>, hc: Vec<f64>) -> Result<Self> {
        let t_final = *times.last().ok_or_else(|| invalid_argument("empty grid"))?;
        let (phi_mean, phi_sd) = phi_statistics(&phi, t_final)?;
        Ok(Self {
            times,
            phi,
            hc,
            phi_mean,
            phi_sd,
        })
    }

    pub fn hc_mean(&self) -> f64 {
        self.hc.iter().sum::<f64>() / self.hc.len() as f64
    }

    /// `max H_c - min H_c`.
    pub fn hc_spread(&self) -> f64 {
        let max = self.hc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.hc.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Terminal cost selected for an optimization, with everything it needs
/// precomputed.
#[derive(Debug, Clone)]
enum Terminal {
    Qfi,
    Cfi { eig: Eigensystem, clamp: f64 },
    Fidelity { target: StateVector },
}

/// Value of the cost at one final state: `cost` is minimized, `objective`
/// is the reported figure of merit (QFI, CFI or fidelity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostValue {
    pub cost: f64,
    pub objective: f64,
}

/// Everything a full forward/backward sweep produces.
#[derive(Debug, Clone)]
pub struct GradientEvaluation {
    pub value: CostValue,
    pub final_state: AugmentedState,
    /// `∫_{I_i} Φ dt` per interval. The cost derivative is twice this.
    pub phi_integrals: Vec<f64>,
    /// `∂CFI/∂φ` in CFI mode.
    pub d_phase: Option<f64>,
    pub diagnostics: DiagnosticsSeries,
}

impl GradientEvaluation {
    /// `∂C/∂Ω_i`.
    pub fn cost_gradient(&self) -> Vec<f64> {
        self.phi_integrals.iter().map(|g| 2.0 * g).collect()
    }
}

/// Forward and adjoint evaluation of one cost on one instance.
#[derive(Debug, Clone)]
pub struct Evaluator {
    spec: ProblemSpec,
    ops: SpinOperators,
    terminal: Terminal,
    init: AugmentedState,
    settings: IntegratorSettings,
    samples_per_interval: usize,
    /// Test hook: negate the costate boundary.
    flip_costate: bool,
}

impl Evaluator {
    pub fn new(
        spec: &ProblemSpec,
        cost: &CostKind,
        settings: IntegratorSettings,
        samples_per_interval: usize,
    ) -> Result<Self> {
        Self::with_clamp(spec, cost, settings, samples_per_interval, DEFAULT_CFI_CLAMP)
    }

    pub fn with_clamp(
        spec: &ProblemSpec,
        cost: &CostKind,
        settings: IntegratorSettings,
        samples_per_interval: usize,
        cfi_clamp: f64,
    ) -> Result<Self> {
        spec.validate()?;
        if samples_per_interval == 0 {
            return Err(invalid_argument("samples_per_interval must be at least 1"));
        }
        let ops = SpinOperators::new(spec.n_spins)?;
        let terminal = match cost {
            CostKind::Qfi => Terminal::Qfi,
            CostKind::Cfi { .. } => {
                if !(cfi_clamp > 0.0) {
                    return Err(invalid_argument("cfi clamp must be positive"));
                }
                Terminal::Cfi {
                    eig: jx_eigensystem(spec.n_spins)?,
                    clamp: cfi_clamp,
                }
            }
            CostKind::Fidelity { target } => {
                if target.dim() != spec.dim() {
                    return Err(invalid_argument(format!(
                        "target has dimension {}, expected {}",
                        target.dim(),
                        spec.dim()
                    )));
                }
                if (target.norm() - 1.0).abs() > 1e-8 {
                    return Err(invalid_argument("fidelity target must have unit norm"));
                }
                Terminal::Fidelity {
                    target: target.clone(),
                }
            }
        };
        Ok(Self {
            spec: *spec,
            init: AugmentedState::initial(spec.n_spins)?,
            ops,
            terminal,
            settings,
            samples_per_interval,
            flip_costate: false,
        })
    }

    /// Negates the costate boundary condition. Only useful for exercising
    /// gradient checks.
    pub fn with_flipped_costate(mut self, flip: bool) -> Self {
        self.flip_costate = flip;
        self
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn operators(&self) -> &SpinOperators {
        &self.ops
    }

    pub fn settings(&self) -> &IntegratorSettings {
        &self.settings
    }

    pub fn samples_per_interval(&self) -> usize {
        self.samples_per_interval
    }

    pub fn eigensystem(&self) -> Option<&Eigensystem> {
        match &self.terminal {
            Terminal::Cfi { eig, .. } => Some(eig),
            _ => None,
        }
    }

    fn propagator<'a>(&'a self, control: &ControlProtocol) -> Propagator<'a> {
        Propagator::new(
            &self.ops,
            &self.spec,
            control,
            &self.settings,
            self.samples_per_interval,
        )
    }

    /// RK5 steps taken by one forward pass over `control`.
    pub fn total_steps(&self, control: &ControlProtocol) -> usize {
        self.propagator(control).n_nodes(control) - 1
    }

    fn check(&self, control: &ControlProtocol) -> Result<()> {
        check_inputs(&self.spec, control, self.spec.dim(), self.samples_per_interval)
    }

    pub fn final_state(&self, control: &ControlProtocol) -> Result<AugmentedState> {
        self.check(control)?;
        let end = self
            .propagator(control)
            .forward(control, self.init.to_flat(), |_, _| {});
        Ok(AugmentedState::from_flat(&end))
    }

    pub fn value_of(&self, final_state: &AugmentedState, phase: f64) -> CostValue {
        match &self.terminal {
            Terminal::Qfi => {
                let c = qfi_cost(final_state);
                CostValue {
                    cost: c,
                    objective: -4.0 * c,
                }
            }
            Terminal::Cfi { eig, clamp } => {
                let f = cfi_value_clamped(&measurement_distribution(final_state, eig, phase), *clamp);
                CostValue {
                    cost: -f,
                    objective: f,
                }
            }
            Terminal::Fidelity { target } => {
                let f = fidelity_value(&final_state.psi0, target);
                CostValue {
                    cost: -f,
                    objective: f,
                }
            }
        }
    }

    /// Costate boundary `∂C/∂⟨ψ(T)|` and, in CFI mode, `∂CFI/∂φ`.
    pub fn boundary(&self, final_state: &AugmentedState, phase: f64) -> (CostatePair, Option<f64>) {
        let (mut b, dphi) = match &self.terminal {
            Terminal::Qfi => (qfi_costate_boundary(final_state), None),
            Terminal::Cfi { eig, clamp } => {
                let (b, d) = cfi_costate_boundary_clamped(final_state, eig, phase, *clamp);
                (b, Some(d))
            }
            Terminal::Fidelity { target } => {
                (fidelity_costate_boundary(&final_state.psi0, target), None)
            }
        };
        if self.flip_costate {
            b.pi0.iter_mut().chain(b.pi1.iter_mut()).for_each(|z| *z = -*z);
        }
        (b, dphi)
    }

    pub fn evaluate(&self, control: &ControlProtocol, phase: f64) -> Result<CostValue> {
        Ok(self.value_of(&self.final_state(control)?, phase))
    }

    pub fn gradient(&self, control: &ControlProtocol, phase: f64) -> Result<GradientEvaluation> {
        self.check(control)?;
        let nodes = self.forward_nodes(control);
        self.gradient_from_nodes(control, phase, &nodes)
    }

    /// Forward pass keeping every substep node, `[ψ0; ψ1]` per node.
    fn forward_nodes(&self, control: &ControlProtocol) -> NodeStore {
        let prop = self.propagator(control);
        let width = 2 * self.spec.dim();
        let mut data = Vec::with_capacity(prop.n_nodes(control) * width);
        prop.forward(control, self.init.to_flat(), |_, x| data.extend_from_slice(x));
        NodeStore { width, data }
    }

    fn gradient_from_nodes(
        &self,
        control: &ControlProtocol,
        phase: f64,
        nodes: &NodeStore,
    ) -> Result<GradientEvaluation> {
        let prop = self.propagator(control);
        let substeps = prop.substeps;
        let n_int = control.n_intervals();
        let final_state = AugmentedState::from_flat(nodes.node(n_int * substeps));
        let value = self.value_of(&final_state, phase);
        if !value.cost.is_finite() {
            return Err(Error::Numeric("cost is not finite".into()));
        }
        let (boundary, d_phase) = self.boundary(&final_state, phase);

        let off = self.ops.jx_offdiag();
        let jz = self.ops.jz();
        let stride = substeps / self.samples_per_interval;
        let n_samples = n_int * self.samples_per_interval + 1;
        let mut phi_nodes = vec![0.0; n_int * substeps + 1];
        let mut hc = vec![0.0; n_samples];
        let hams: Vec<Hamiltonian> = control.values().iter().map(|&v| prop.hamiltonian(v)).collect();
        prop.backward(control, boundary.to_flat(), |node, interval, c| {
            let x = nodes.node(node);
            phi_nodes[node] = phi_flat(off, c, x);
            if node % stride == 0 {
                hc[node / stride] = hc_flat(&hams[interval], jz, c, x);
            }
        });

        let h = control.interval_duration() / substeps as f64;
        let phi_integrals = (0..n_int)
            .map(|i| simpson(&phi_nodes[i * substeps..=(i + 1) * substeps], h))
            .collect();
        let phi: Vec<f64> = (0..n_samples).map(|j| phi_nodes[j * stride]).collect();
        let times = (0..n_samples)
            .map(|j| {
                if j + 1 == n_samples {
                    control.t_final()
                } else {
                    control.t_final() * j as f64 / (n_samples - 1) as f64
                }
            })
            .collect();
        Ok(GradientEvaluation {
            value,
            final_state,
            phi_integrals,
            d_phase,
            diagnostics: DiagnosticsSeries::new(times, phi, hc)?,
        })
    }
}

struct NodeStore {
    width: usize,
    data: Vec<Complex64>,
}

impl NodeStore {
    fn node(&self, j: usize) -> &[Complex64] {
        &self.data[j * self.width..(j + 1) * self.width]
    }

    fn final_state(&self) -> AugmentedState {
        let n = self.data.len() / self.width;
        AugmentedState::from_flat(self.node(n - 1))
    }
}

/// Composite Simpson rule on an odd number of equally spaced samples.
fn simpson(f: &[f64], h: f64) -> f64 {
    let n = f.len() - 1;
    debug_assert!(n % 2 == 0 && n > 0);
    let mut acc = f[0] + f[n];
    for (k, v) in f.iter().enumerate().take(n).skip(1) {
        acc += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// `Φ_sd` fell below the tolerance.
    Converged,
    /// Relative cost improvement over the stall window fell below threshold.
    Stationary,
    MaxIterations,
    /// The line search could not find an acceptable step.
    Stalled,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::Stationary => "stationary",
            Status::MaxIterations => "max_iterations",
            Status::Stalled => "stalled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub phi_sd: f64,
    pub step_size: f64,
}

/// How the first trial step of each line search is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Previous accepted step times `grow`.
    Doubling,
    /// Barzilai–Borwein step `sᵀs / sᵀy` from the last two iterates, falling
    /// back to doubling when `sᵀy ≤ 0`.
    BarzilaiBorwein,
}

impl StepRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepRule::Doubling => "doubling",
            StepRule::BarzilaiBorwein => "bb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub n_intervals: usize,
    pub max_iters: usize,
    pub tol_phi_sd: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    pub shrink: f64,
    /// Factor applied to the last accepted step to seed the next search.
    pub grow: f64,
    pub step_rule: StepRule,
    /// First trial step; `None` picks `1 / max|g_i|` so the largest control
    /// change of the first trial is 1.
    pub initial_step: Option<f64>,
    pub min_step: f64,
    pub stall_window: usize,
    pub stall_rel_tol: f64,
    /// Value of the deterministic start `Ω_i ≡ init_value`.
    pub init_value: f64,
    /// Number of additional seeded random starts, uniform in `±init_range`.
    pub restarts: usize,
    pub init_range: f64,
    pub seed: u64,
    /// Explicit starting control; replaces the constant start when set.
    pub initial_control: Option<Vec<f64>>,
    /// CFI mode: also start from `φ_init + π/4` and `φ_init + π/2`.
    pub phase_restart: bool,
    pub samples_per_interval: usize,
    pub integrator: IntegratorSettings,
    pub cfi_clamp: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            n_intervals: 64,
            max_iters: 2000,
            tol_phi_sd: 1e-3,
            armijo_c1: 1e-4,
            shrink: 0.5,
            grow: 2.0,
            step_rule: StepRule::BarzilaiBorwein,
            initial_step: None,
            min_step: 1e-14,
            stall_window: 50,
            stall_rel_tol: 1e-10,
            init_value: 1.0,
            restarts: 0,
            init_range: 2.0,
            seed: 0,
            initial_control: None,
            phase_restart: true,
            samples_per_interval: DEFAULT_SAMPLES_PER_INTERVAL,
            integrator: IntegratorSettings::default(),
            cfi_clamp: DEFAULT_CFI_CLAMP,
        }
    }
}

impl OptimizerOptions {
    /// Defaults with the `Φ_sd` tolerance appropriate for `cost`.
    pub fn for_cost(cost: &CostKind) -> Self {
        let mut o = Self::default();
        if matches!(cost, CostKind::Cfi { .. }) {
            o.tol_phi_sd = 1e-2;
        }
        o
    }

    fn validate(&self) -> Result<()> {
        if self.n_intervals == 0 {
            return Err(invalid_argument("n_intervals must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(invalid_argument("max_iters must be at least 1"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(invalid_argument("shrink must lie in (0, 1)"));
        }
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            return Err(invalid_argument("armijo_c1 must lie in (0, 1)"));
        }
        if !(self.grow >= 1.0) {
            return Err(invalid_argument("grow must be at least 1"));
        }
        if let Some(s) = self.initial_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid_argument("initial_step must be positive"));
            }
        }
        if let Some(c) = &self.initial_control {
            if c.len() != self.n_intervals {
                return Err(invalid_argument(format!(
                    "initial control has {} values, expected {}",
                    c.len(),
                    self.n_intervals
                )));
            }
        }
        let finite = [
            self.tol_phi_sd,
            self.min_step,
            self.stall_rel_tol,
            self.init_value,
            self.init_range,
            self.cfi_clamp,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(invalid_argument("optimizer settings must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub control: ControlProtocol,
    /// Measurement phase offset, CFI mode only.
    pub phase: Option<f64>,
    pub objective: f64,
    pub diagnostics: DiagnosticsSeries,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    pub status: Status,
    /// Index of the winning start (0 is the deterministic start).
    pub start_index: usize,
    pub final_state: AugmentedState,
}

struct Start {
    control: Vec<f64>,
    phase: f64,
}

fn starts(spec: &ProblemSpec, cost: &CostKind, opts: &OptimizerOptions) -> Vec<Start> {
    let n = opts.n_intervals;
    let mut controls = vec![
        opts.initial_control
            .clone()
            .unwrap_or_else(|| vec![opts.init_value; n]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        controls.push(
            (0..n)
                .map(|_| rng.gen_range(-opts.init_range..=opts.init_range))
                .collect(),
        );
    }
    for c in &mut controls {
        project_in_place(c, spec.u_max);
    }
    let phases = match cost {
        // 0 and π/2 are stationary points of the phase ascent; the second
        // and third starts sit between and on them.
        CostKind::Cfi { phase } if opts.phase_restart => {
            vec![*phase, normalize_phase(phase + FRAC_PI_4), normalize_phase(phase + FRAC_PI_2)]
        }
        CostKind::Cfi { phase } => vec![*phase],
        _ => vec![0.0],
    };
    controls
        .into_iter()
        .flat_map(|c| {
            phases.iter().map(move |&p| Start {
                control: c.clone(),
                phase: p,
            })
        })
        .collect()
}

/// Maximizes the objective selected by `cost` over piecewise-constant
/// controls on `opts.n_intervals` intervals. Every start is descended
/// independently; the best objective wins, ties going to the earlier start.
pub fn optimize(spec: &ProblemSpec, cost: &CostKind, opts: &OptimizerOptions) -> Result<OptimizationResult> {
    opts.validate()?;
    let eval = Evaluator::with_clamp(
        spec,
        cost,
        opts.integrator,
        opts.samples_per_interval,
        opts.cfi_clamp,
    )?;
    let mut best: Option<OptimizationResult> = None;
    for (index, start) in starts(spec, cost, opts).into_iter().enumerate() {
        let mut run = descend(&eval, cost, start, opts)?;
        run.start_index = index;
        let better = match &best {
            None => true,
            Some(b) => run.objective > b.objective,
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Largest accepted `| ‖ψ0(T)‖ - 1 |` at a line-search trial point.
pub const NORM_GUARD: f64 = 1e-3;

/// Projected gradient descent from a single start.
fn descend(eval: &Evaluator, cost: &CostKind, start: Start, opts: &OptimizerOptions) -> Result<OptimizationResult> {
    let spec = eval.spec();
    let t_final = spec.t_final;
    let is_cfi = matches!(cost, CostKind::Cfi { .. });
    let mut control = ControlProtocol::new(t_final, start.control)?;
    let mut phase = start.phase;

    let mut nodes = eval.forward_nodes(&control);
    let mut current = eval.gradient_from_nodes(&control, phase, &nodes)?;
    let mut history = Vec::new();
    let mut costs = vec![current.value.cost];
    let mut step: Option<f64> = opts.initial_step;
    let mut phase_step = 1.0;
    let mut status = Status::MaxIterations;
    let mut iterations = 0;

    history.push(IterationRecord {
        iteration: 0,
        objective: current.value.objective,
        phi_sd: current.diagnostics.phi_sd,
        step_size: 0.0,
    });

    while iterations < opts.max_iters {
        if current.diagnostics.phi_sd < opts.tol_phi_sd {
            status = Status::Converged;
            break;
        }
        let grad = &current.phi_integrals;
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax == 0.0 {
            status = Status::Converged;
            break;
        }
        let mut gamma = step.unwrap_or(1.0 / gmax);

        // Control line search: backtrack until sufficient decrease.
        let accepted = loop {
            if gamma < opts.min_step {
                break None;
            }
            let mut trial = control.values().to_vec();
            for (v, g) in trial.iter_mut().zip(grad) {
                *v -= gamma * g;
            }
            project_in_place(&mut trial, spec.u_max);
            // Directional derivative of C along (trial - current).
            let slope: f64 = trial
                .iter()
                .zip(control.values())
                .zip(grad)
                .map(|((t, c), g)| 2.0 * g * (t - c))
                .sum();
            let trial = ControlProtocol::new(t_final, trial)?;
            let trial_nodes = eval.forward_nodes(&trial);
            let final_state = trial_nodes.final_state();
            // Large trial controls can outrun the fixed step; the exact
            // evolution is unitary, so norm drift flags a failed integration.
            let integrated = (final_state.psi0.norm() - 1.0).abs() <= NORM_GUARD;
            let value = eval.value_of(&final_state, phase);
            if integrated
                && value.cost.is_finite()
                && value.cost <= current.value.cost + opts.armijo_c1 * slope
            {
                break Some((trial, trial_nodes));
            }
            gamma *= opts.shrink;
        };
        let Some((trial, trial_nodes)) = accepted else {
            status = Status::Stalled;
            break;
        };
        let previous = std::mem::replace(&mut control, trial);
        nodes = trial_nodes;
        step = Some(gamma * opts.grow);
        iterations += 1;

        if is_cfi {
            phase = phase_ascent(eval, &nodes.final_state(), phase, &mut phase_step, opts);
        }

        let old_grad = std::mem::take(&mut current.phi_integrals);
        current = eval.gradient_from_nodes(&control, phase, &nodes)?;
        if opts.step_rule == StepRule::BarzilaiBorwein {
            let mut ss = 0.0;
            let mut sy = 0.0;
            for i in 0..old_grad.len() {
                let si = control.values()[i] - previous.values()[i];
                ss += si * si;
                sy += si * (current.phi_integrals[i] - old_grad[i]);
            }
            if sy > 0.0 && ss > 0.0 {
                step = Some(ss / sy);
            }
        }
        costs.push(current.value.cost);
        history.push(IterationRecord {
            iteration: iterations,
            objective: current.value.objective,
            phi_sd: current.diagnostics.phi_sd,
            step_size: gamma,
        });

        if costs.len() > opts.stall_window {
            let old = costs[costs.len() - 1 - opts.stall_window];
            let new = current.value.cost;
            if (old - new).abs() < opts.stall_rel_tol * new.abs() {
                status = Status::Stationary;
                break;
            }
        }
    }

    if status == Status::MaxIterations && current.diagnostics.phi_sd < opts.tol_phi_sd {
        status = Status::Converged;
    }

    Ok(OptimizationResult {
        control,
        phase: is_cfi.then_some(normalize_phase(phase)),
        objective: current.value.objective,
        diagnostics: current.diagnostics,
        iterations,
        history,
        status,
        start_index: 0,
        final_state: current.final_state,
    })
}

/// One Armijo ascent step on `φ` at a fixed final state. Only the
/// measurement changes with `φ`, so no re-integration is needed.
fn phase_ascent(
    eval: &Evaluator,
    final_state: &AugmentedState,
    phase: f64,
    phase_step: &mut f64,
    opts: &OptimizerOptions,
) -> f64 {
    let (_, d) = eval.boundary(final_state, phase);
    let d = d.unwrap_or(0.0);
    if d == 0.0 || !d.is_finite() {
        return phase;
    }
    let f0 = eval.value_of(final_state, phase).objective;
    let mut gamma = *phase_step;
    while gamma >= opts.min_step {
        let trial = phase + gamma * d;
        let f = eval.value_of(final_state, trial).objective;
        if f.is_finite() && f >= f0 + opts.armijo_c1 * gamma * d * d {
            *phase_step = gamma * opts.grow;
            return normalize_phase(trial);
        }
        gamma *= opts.shrink;
    }
    *phase_step = opts.min_step.max(gamma);
    phase
}

/// Integrated switching function per interval for a given control; the cost
/// derivative `∂C/∂Ω_i` is twice each entry.
pub fn interval_gradients(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    cost: &CostKind,
    settings: IntegratorSettings,
) -> Result<Vec<f64>> {
    let phase = match cost {
        CostKind::Cfi { phase } => *phase,
        _ => 0.0,
    };
    let eval = Evaluator::new(spec, cost, settings, DEFAULT_SAMPLES_PER_INTERVAL)?;
    Ok(eval.gradient(control, phase)?.phi_integrals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{evolve_costate_backward, evolve_forward};
    use crate::spin::hl_state;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn phi_statistics_constant_and_sine() {
        let c = vec![-0.7; 33];
        let (m, sd) = phi_statistics(&c, 2.5).unwrap();
        assert_abs_diff_eq!(m, -0.7, epsilon = 1e-14);
        assert_abs_diff_eq!(sd, 0.7, epsilon = 1e-14);

        let t = 3.0;
        let n = 4001;
        let s: Vec<f64> = (0..n)
            .map(|j| (2.0 * PI * j as f64 / (n - 1) as f64).sin())
            .collect();
        let (m, sd) = phi_statistics(&s, t).unwrap();
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sd, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-9);
        assert!(phi_statistics(&[1.0], 1.0).is_err());
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_control(&[7.0, -1.0, 3.0], 4.0), vec![4.0, -1.0, 3.0]);
        assert_eq!(project_control(&[0.5, -0.5], 1.0), vec![0.5, -0.5]);
        assert_eq!(project_control(&[-9.0], 2.0), vec![-2.0]);
    }

    #[test]
    fn simpson_exact_for_cubics() {
        let h = 0.25;
        let f: Vec<f64> = (0..9).map(|k| (k as f64 * h).powi(3)).collect();
        assert_abs_diff_eq!(simpson(&f, h), 2f64.powi(4) / 4.0, epsilon = 1e-13);
    }

    #[test]
    fn rescale_examples() {
        let spec = ProblemSpec::new(20, 4.0, 1.0).unwrap();
        let c = ControlProtocol::constant(4, 1.0, 80.0).unwrap();
        let r = dimensionless_rescale(&c, &spec).unwrap();
        assert!(r.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert_eq!(r.edges, vec![0.0, 20.0, 40.0, 60.0, 80.0]);

        let c = ControlProtocol::new(1.0, vec![0.3, -7.0, 12.5]).unwrap();
        let back = restore_dimensional(&dimensionless_rescale(&c, &spec).unwrap()).unwrap();
        for (a, b) in back.values().iter().zip(c.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((back.t_final() - 1.0).abs() <= 1e-12);

        let flat = ProblemSpec::new(20, 0.0, 1.0).unwrap();
        assert!(dimensionless_rescale(&c, &flat).is_err());
    }

    #[test]
    fn zero_costate_gives_zero_diagnostics() {
        let spec = ProblemSpec::new(3, 1.0, 1.0).unwrap();
        let control = ControlProtocol::new(1.0, vec![1.0, 2.0]).unwrap();
        let ops = SpinOperators::new(3).unwrap();
        let fwd = evolve_forward(&spec, &control, &AugmentedState::initial(3).unwrap(), 4).unwrap();
        let bwd = evolve_costate_backward(&spec, &control, &CostatePair::zeros(4), 4).unwrap();
        assert!(switching_function(&fwd, &bwd, &ops).unwrap().iter().all(|&p| p == 0.0));
        assert!(control_hamiltonian(&fwd, &bwd, &ops, &spec, &control)
            .unwrap()
            .iter()
            .all(|&h| h == 0.0));
        let short = evolve_costate_backward(&spec, &control, &CostatePair::zeros(4), 2).unwrap();
        assert!(switching_function(&fwd, &short, &ops).is_err());
    }

    #[test]
    fn hc_constant_within_intervals() {
        let spec = ProblemSpec::new(6, 2.0, 1.0).unwrap();
        let control = ControlProtocol::new(1.0, vec![3.0, -4.0, 1.5, 0.0]).unwrap();
        let eval = Evaluator::new(&spec, &CostKind::Qfi, IntegratorSettings::default(), 8).unwrap();
        let g = eval.gradient(&control, 0.0).unwrap();
        let d = &g.diagnostics;
        for i in 0..4 {
            let first = d.hc[i * 8];
            for j in i * 8..(i + 1) * 8 {
                assert!((d.hc[j] - first).abs() <= 1e-8, "interval {i}");
            }
        }
        assert!((d.hc[32] - d.hc[31]).abs() <= 1e-8);
    }

    #[test]
    fn sampled_diagnostics_agree_with_evaluator() {
        let spec = ProblemSpec::new(5, 1.5, 1.0).unwrap();
        let control = ControlProtocol::new(1.0, vec![2.0, -1.0, 0.5]).unwrap();
        let eval = Evaluator::new(&spec, &CostKind::Qfi, IntegratorSettings::default(), 4).unwrap();
        let g = eval.gradient(&control, 0.0).unwrap();
        let ops = SpinOperators::new(5).unwrap();
        let fwd = evolve_forward(&spec, &control, &AugmentedState::initial(5).unwrap(), 4).unwrap();
        let b = qfi_costate_boundary(fwd.last());
        let bwd = evolve_costate_backward(&spec, &control, &b, 4).unwrap();
        let phi = switching_function(&fwd, &bwd, &ops).unwrap();
        let hc = control_hamiltonian(&fwd, &bwd, &ops, &spec, &control).unwrap();
        for j in 0..phi.len() {
            assert!((phi[j] - g.diagnostics.phi[j]).abs() <= 1e-12);
            assert!((hc[j] - g.diagnostics.hc[j]).abs() <= 1e-12);
        }
        let (m, sd) = phi_statistics(&phi, 1.0).unwrap();
        assert!((m - g.diagnostics.phi_mean).abs() <= 1e-12);
        assert!((sd - g.diagnostics.phi_sd).abs() <= 1e-12);
    }

    #[test]
    fn fidelity_target_validated() {
        let spec = ProblemSpec::new(4, 1.0, 1.0).unwrap();
        let bad = CostKind::Fidelity {
            target: StateVector::zeros(5),
        };
        assert!(Evaluator::new(&spec, &bad, IntegratorSettings::default(), 8).is_err());
        let wrong_dim = CostKind::Fidelity {
            target: hl_state(3).unwrap(),
        };
        assert!(Evaluator::new(&spec, &wrong_dim, IntegratorSettings::default(), 8).is_err());
    }

    #[test]
    fn options_validated() {
        let spec = ProblemSpec::new(2, 1.0, 1.0).unwrap();
        let mut o = OptimizerOptions::default();
        o.n_intervals = 0;
        assert!(optimize(&spec, &CostKind::Qfi, &o).is_err());
        let mut o = OptimizerOptions::default();
        o.max_iters = 0;
        assert!(optimize(&spec, &CostKind::Qfi, &o).is_err());
    }

    #[test]
    fn small_qfi_run_improves_monotonically() {
        let spec = ProblemSpec::new(4, 1.0, 1.0).unwrap();
        let mut o = OptimizerOptions::default();
        o.n_intervals = 8;
        o.max_iters = 60;
        let r = optimize(&spec, &CostKind::Qfi, &o).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1].objective >= w[0].objective - 1e-12);
        }
        assert!(r.objective > r.history[0].objective);
        assert!(r.objective <= 16.0 + 1e-9);
    }

    #[test]
    fn bounded_run_respects_bound() {
        let spec = ProblemSpec::new(6, 0.5, 1.0).unwrap().with_u_max(Some(1.5)).unwrap();
        let mut o = OptimizerOptions::default();
        o.n_intervals = 8;
        o.max_iters = 40;
        o.init_value = 5.0;
        let r = optimize(&spec, &CostKind::Qfi, &o).unwrap();
        assert!(r.control.values().iter().all(|v| v.abs() <= 1.5));
    }

    #[test]
    fn restarts_are_seeded() {
        let spec = ProblemSpec::new(3, 1.0, 1.0).unwrap();
        let mut o = OptimizerOptions::default();
        o.n_intervals = 4;
        o.max_iters = 5;
        o.restarts = 2;
        o.seed = 11;
        let a = optimize(&spec, &CostKind::Qfi, &o).unwrap();
        let b = optimize(&spec, &CostKind::Qfi, &o).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cfi_phase_starts() {
        let spec = ProblemSpec::new(2, 1.0, 1.0).unwrap();
        let o = OptimizerOptions::default();
        let s = starts(&spec, &CostKind::cfi(0.0), &o);
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].phase, FRAC_PI_4);
        assert_eq!(s[2].phase, FRAC_PI_2);
        assert_eq!(starts(&spec, &CostKind::Qfi, &o).len(), 1);
    }
}
