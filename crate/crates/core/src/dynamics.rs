//! Forward augmented dynamics of `(ψ0, ψ1) = (ψ, ∂ωψ)` and backward costate
//! dynamics of `(π0, π1)` under a piecewise-constant control.
//!
//! Forward generator (block lower triangular):
//!
//! ```text
//! d/dt [ψ0]   [ -iH    0  ] [ψ0]
//!      [ψ1] = [ -iJz  -iH ] [ψ1]
//! ```
//!
//! The costate generator is the negative adjoint of the forward one, so the
//! pairing `⟨π0|ψ0⟩ + ⟨π1|ψ1⟩` is conserved along matched trajectories.
//! Both directions use the same fixed-step RK5 grid, so forward nodes and
//! costate nodes line up exactly.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, invalid_argument};
use crate::spin::{SpinOperators, apply_tridiagonal, coherent_x_state};
use crate::state::StateVector;

pub const DEFAULT_SAMPLES_PER_INTERVAL: usize = 8;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Physical instance: `N` spins, twist `χ`, estimand `ω`, final time `T` and
/// an optional control amplitude bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub n_spins: usize,
    pub chi: f64,
    pub omega: f64,
    pub t_final: f64,
    pub u_max: Option<f64>,
}

impl ProblemSpec {
    pub fn new(n_spins: usize, chi: f64, t_final: f64) -> Result<Self> {
        let spec = Self {
            n_spins,
            chi,
            omega: 0.0,
            t_final,
            u_max: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn with_u_max(mut self, u_max: Option<f64>) -> Result<Self> {
        self.u_max = u_max;
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.n_spins + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_spins == 0 {
            return Err(Error::InvalidInstance("n_spins must be at least 1".into()));
        }
        if !self.chi.is_finite() || !self.omega.is_finite() {
            return Err(Error::InvalidInstance("chi and omega must be finite".into()));
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(Error::InvalidInstance(format!(
                "t_final must be positive, got {}",
                self.t_final
            )));
        }
        if let Some(u) = self.u_max {
            if !(u.is_finite() && u > 0.0) {
                return Err(Error::InvalidInstance(format!(
                    "u_max must be positive, got {u}"
                )));
            }
        }
        Ok(())
    }
}

/// Control values `Ω_i` applied on `[i·T/N_t, (i+1)·T/N_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProtocol {
    t_final: f64,
    values: Vec<f64>,
}

impl ControlProtocol {
    pub fn new(t_final: f64, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid_argument("control needs at least one interval"));
        }
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(invalid_argument(format!("t_final must be positive, got {t_final}")));
        }
        Ok(Self { t_final, values })
    }

    pub fn constant(n_intervals: usize, t_final: f64, value: f64) -> Result<Self> {
        Self::new(t_final, vec![value; n_intervals])
    }

    pub fn n_intervals(&self) -> usize {
        self.values.len()
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn interval_duration(&self) -> f64 {
        self.t_final / self.values.len() as f64
    }

    pub fn interval_start(&self, i: usize) -> f64 {
        self.t_final * i as f64 / self.values.len() as f64
    }

    /// Control value at time `t`; `t = T` maps to the last interval.
    pub fn value_at(&self, t: f64) -> f64 {
        let n = self.values.len();
        let i = ((t / self.t_final) * n as f64).floor();
        let i = if i < 0.0 { 0 } else { (i as usize).min(n - 1) };
        self.values[i]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub psi0: StateVector,
    pub psi1: StateVector,
}

impl AugmentedState {
    /// `(|coh-x⟩, 0)`.
    pub fn initial(n_spins: usize) -> Result<Self> {
        let psi0 = coherent_x_state(n_spins)?;
        let psi1 = StateVector::zeros(psi0.dim());
        Ok(Self { psi0, psi1 })
    }

    pub fn dim(&self) -> usize {
        self.psi0.dim()
    }

    pub(crate) fn to_flat(&self) -> Vec<Complex64> {
        [&self.psi0[..], &self.psi1[..]].concat()
    }

    pub(crate) fn from_flat(flat: &[Complex64]) -> Self {
        let d = flat.len() / 2;
        Self {
            psi0: StateVector::new(flat[..d].to_vec()),
            psi1: StateVector::new(flat[d..].to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostatePair {
    pub pi0: StateVector,
    pub pi1: StateVector,
}

impl CostatePair {
    pub fn zeros(dim: usize) -> Self {
        Self {
            pi0: StateVector::zeros(dim),
            pi1: StateVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.pi0.dim()
    }

    /// `⟨π0|ψ0⟩ + ⟨π1|ψ1⟩`.
    pub fn pairing(&self, state: &AugmentedState) -> Complex64 {
        self.pi0.inner(&state.psi0) + self.pi1.inner(&state.psi1)
    }

    pub(crate) fn to_flat(&self) -> Vec<Complex64> {
        [&self.pi0[..], &self.pi1[..]].concat()
    }

    pub(crate) fn from_flat(flat: &[Complex64]) -> Self {
        let d = flat.len() / 2;
        Self {
            pi0: StateVector::new(flat[..d].to_vec()),
            pi1: StateVector::new(flat[d..].to_vec()),
        }
    }
}

/// States sampled on a uniform grid with `samples_per_interval` points per
/// control interval, `K·N_t + 1` samples in total.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    pub samples_per_interval: usize,
}

impl<S> SampledTrajectory<S> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> &S {
        &self.states[0]
    }

    pub fn last(&self) -> &S {
        self.states.last().expect("trajectory has at least two samples")
    }

    /// Index of the control interval a sample belongs to. Interval boundaries
    /// belong to the interval that starts there; the final sample belongs to
    /// the last interval.
    pub fn interval_of(&self, sample: usize) -> usize {
        let n_intervals = (self.times.len() - 1) / self.samples_per_interval;
        (sample / self.samples_per_interval).min(n_intervals - 1)
    }
}

/// Step-count policy for the fixed-step RK5 integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSettings {
    /// Fixed number of substeps per control interval; overrides the
    /// automatic rule when set.
    pub substeps: Option<usize>,
    /// Automatic rule: substep length at most `step_scale / (1 + N·χ)`.
    pub step_scale: f64,
    /// Automatic rule: also `h·max|Ω|·N/2` at most this.
    pub control_scale: f64,
    pub min_substeps: usize,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            substeps: None,
            step_scale: 0.002,
            control_scale: 0.1,
            min_substeps: 16,
        }
    }
}

impl IntegratorSettings {
    pub fn fixed(substeps: usize) -> Self {
        Self {
            substeps: Some(substeps),
            ..Self::default()
        }
    }

    /// Same policy with `factor` times as many substeps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            substeps: self.substeps.map(|s| s * factor),
            step_scale: self.step_scale / factor as f64,
            control_scale: self.control_scale / factor as f64,
            min_substeps: self.min_substeps * factor,
        }
    }

    /// Substeps per interval, rounded up to a multiple of
    /// `samples_per_interval` and to an even number.
    pub fn substeps_per_interval(
        &self,
        spec: &ProblemSpec,
        interval_duration: f64,
        samples_per_interval: usize,
        max_control: f64,
    ) -> usize {
        let raw = match self.substeps {
            Some(n) => n,
            None => {
                let rate = 1.0 + spec.n_spins as f64 * spec.chi.abs();
                let n = (interval_duration * rate / self.step_scale).ceil() as usize;
                let turn = max_control.abs() * spec.n_spins as f64 / 2.0;
                let m = (interval_duration * turn / self.control_scale).ceil() as usize;
                n.max(m).max(self.min_substeps)
            }
        };
        let k = samples_per_interval.max(1);
        let unit = if k % 2 == 0 { k } else { 2 * k };
        raw.max(1).div_ceil(unit) * unit
    }
}

/// A constant linear generator `x ↦ G·x`.
pub(crate) trait LinearGenerator {
    fn apply(&self, x: &[Complex64], out: &mut [Complex64]);
}

/// Horner divisors of the Dormand–Prince 5th-order stability polynomial
/// `R(z) = 1 + z + z²/2 + z³/6 + z⁴/24 + z⁵/120 + z⁶/600`, innermost first.
/// For a constant linear generator one fixed DP5 step is exactly `R(hG)`.
const HORNER_DIVISORS: [f64; 6] = [5.0, 5.0, 4.0, 3.0, 2.0, 1.0];

pub(crate) struct Rk5Workspace {
    acc: Vec<Complex64>,
    gy: Vec<Complex64>,
}

impl Rk5Workspace {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            acc: vec![ZERO; len],
            gy: vec![ZERO; len],
        }
    }
}

/// One explicit RK5 step of length `h` (negative `h` steps backward).
pub(crate) fn rk5_step<G: LinearGenerator>(
    g: &G,
    x: &mut [Complex64],
    h: f64,
    ws: &mut Rk5Workspace,
) {
    let Rk5Workspace { acc, gy } = ws;
    acc.copy_from_slice(x);
    for c in HORNER_DIVISORS {
        g.apply(acc, gy);
        let s = h / c;
        for ((a, &xi), &gi) in acc.iter_mut().zip(x.iter()).zip(gy.iter()) {
            *a = xi + gi * s;
        }
    }
    x.copy_from_slice(acc);
}

struct DenseGenerator<'a>(&'a DMatrix<Complex64>);

impl LinearGenerator for DenseGenerator<'_> {
    fn apply(&self, x: &[Complex64], out: &mut [Complex64]) {
        let m = self.0;
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = ZERO;
            for (c, xc) in x.iter().enumerate() {
                acc += m[(r, c)] * xc;
            }
            *o = acc;
        }
    }
}

/// Integrates `x' = G·x` over `dt` with `n_substeps` equal RK5 steps.
pub fn propagate_interval(
    generator: &DMatrix<Complex64>,
    state: &[Complex64],
    dt: f64,
    n_substeps: usize,
) -> Result<Vec<Complex64>> {
    if !generator.is_square() || generator.nrows() != state.len() {
        return Err(invalid_argument(format!(
            "generator is {}x{}, state has length {}",
            generator.nrows(),
            generator.ncols(),
            state.len()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(invalid_argument(format!("dt must be positive, got {dt}")));
    }
    if n_substeps == 0 {
        return Err(invalid_argument("n_substeps must be at least 1"));
    }
    let finite = |z: &Complex64| z.re.is_finite() && z.im.is_finite();
    if !generator.iter().all(finite) || !state.iter().all(finite) {
        return Err(Error::Numeric("non-finite generator or state entry".into()));
    }
    let g = DenseGenerator(generator);
    let mut x = state.to_vec();
    let mut ws = Rk5Workspace::new(x.len());
    let h = dt / n_substeps as f64;
    for _ in 0..n_substeps {
        rk5_step(&g, &mut x, h, &mut ws);
    }
    Ok(x)
}

#[inline]
fn times_minus_i(z: Complex64) -> Complex64 {
    Complex64::new(z.im, -z.re)
}

/// `H = χJz² + ωJz + ΩJx` for a fixed control value, in tridiagonal form.
pub(crate) struct Hamiltonian {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl Hamiltonian {
    pub(crate) fn new(ops: &SpinOperators, chi: f64, omega: f64, control: f64) -> Self {
        let diag = ops
            .jz()
            .iter()
            .zip(ops.jz2())
            .map(|(m, m2)| chi * m2 + omega * m)
            .collect();
        let off = ops.jx_offdiag().iter().map(|a| control * a).collect();
        Self { diag, off }
    }

    pub(crate) fn apply(&self, x: &[Complex64], out: &mut [Complex64]) {
        apply_tridiagonal(&self.diag, &self.off, x, out);
    }

    pub(crate) fn dim(&self) -> usize {
        self.diag.len()
    }
}

/// Forward augmented generator acting on `[ψ0; ψ1]`.
struct ForwardGenerator<'a> {
    h: &'a Hamiltonian,
    jz: &'a [f64],
}

impl LinearGenerator for ForwardGenerator<'_> {
    fn apply(&self, x: &[Complex64], out: &mut [Complex64]) {
        let d = self.h.dim();
        let (x0, x1) = x.split_at(d);
        let (o0, o1) = out.split_at_mut(d);
        self.h.apply(x0, o0);
        self.h.apply(x1, o1);
        for k in 0..d {
            o1[k] = times_minus_i(o1[k] + x0[k] * self.jz[k]);
            o0[k] = times_minus_i(o0[k]);
        }
    }
}

/// Costate generator acting on `[π0; π1]`; the negative adjoint of
/// [`ForwardGenerator`].
struct CostateGenerator<'a> {
    h: &'a Hamiltonian,
    jz: &'a [f64],
}

impl LinearGenerator for CostateGenerator<'_> {
    fn apply(&self, x: &[Complex64], out: &mut [Complex64]) {
        let d = self.h.dim();
        let (x0, x1) = x.split_at(d);
        let (o0, o1) = out.split_at_mut(d);
        self.h.apply(x0, o0);
        self.h.apply(x1, o1);
        for k in 0..d {
            o0[k] = times_minus_i(o0[k] + x1[k] * self.jz[k]);
            o1[k] = times_minus_i(o1[k]);
        }
    }
}

/// Plain Schrödinger generator `-iH` on a single state.
struct StateGenerator<'a> {
    h: &'a Hamiltonian,
}

impl LinearGenerator for StateGenerator<'_> {
    fn apply(&self, x: &[Complex64], out: &mut [Complex64]) {
        self.h.apply(x, out);
        for o in out.iter_mut() {
            *o = times_minus_i(*o);
        }
    }
}

/// Shared integration grid for one instance and one control.
///
/// Node `j` sits at `t = j·T/(N_t·S)` where `S` is the substep count per
/// interval; visitors see every node in integration order.
pub(crate) struct Propagator<'a> {
    pub(crate) ops: &'a SpinOperators,
    pub(crate) spec: &'a ProblemSpec,
    pub(crate) substeps: usize,
}

impl<'a> Propagator<'a> {
    pub(crate) fn new(
        ops: &'a SpinOperators,
        spec: &'a ProblemSpec,
        control: &ControlProtocol,
        settings: &IntegratorSettings,
        samples_per_interval: usize,
    ) -> Self {
        let max_control = control.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let substeps = settings.substeps_per_interval(
            spec,
            control.interval_duration(),
            samples_per_interval,
            max_control,
        );
        Self {
            ops,
            spec,
            substeps,
        }
    }

    pub(crate) fn n_nodes(&self, control: &ControlProtocol) -> usize {
        control.n_intervals() * self.substeps + 1
    }

    pub(crate) fn hamiltonian(&self, control_value: f64) -> Hamiltonian {
        Hamiltonian::new(self.ops, self.spec.chi, self.spec.omega, control_value)
    }

    /// Integrates `[ψ0; ψ1]` from `t = 0` to `T`, calling `visit(node, state)`
    /// at every node including both ends. Returns the final state.
    pub(crate) fn forward(
        &self,
        control: &ControlProtocol,
        init: Vec<Complex64>,
        mut visit: impl FnMut(usize, &[Complex64]),
    ) -> Vec<Complex64> {
        let mut x = init;
        let mut ws = Rk5Workspace::new(x.len());
        let h = control.interval_duration() / self.substeps as f64;
        visit(0, &x);
        let mut node = 0;
        for &value in control.values() {
            let ham = self.hamiltonian(value);
            let g = ForwardGenerator {
                h: &ham,
                jz: self.ops.jz(),
            };
            for _ in 0..self.substeps {
                rk5_step(&g, &mut x, h, &mut ws);
                node += 1;
                visit(node, &x);
            }
        }
        x
    }

    /// Integrates `[π0; π1]` from `t = T` back to 0, calling
    /// `visit(node, interval, costate)` at every node. The node shared by two
    /// intervals is reported once, with the later interval.
    pub(crate) fn backward(
        &self,
        control: &ControlProtocol,
        terminal: Vec<Complex64>,
        mut visit: impl FnMut(usize, usize, &[Complex64]),
    ) -> Vec<Complex64> {
        let mut x = terminal;
        let mut ws = Rk5Workspace::new(x.len());
        let h = control.interval_duration() / self.substeps as f64;
        let n = control.n_intervals();
        let mut node = n * self.substeps;
        visit(node, n - 1, &x);
        for (i, &value) in control.values().iter().enumerate().rev() {
            let ham = self.hamiltonian(value);
            let g = CostateGenerator {
                h: &ham,
                jz: self.ops.jz(),
            };
            for _ in 0..self.substeps {
                rk5_step(&g, &mut x, -h, &mut ws);
                node -= 1;
                visit(node, i, &x);
            }
        }
        x
    }

    /// Evolves only the physical state `ψ0`.
    pub(crate) fn forward_state(
        &self,
        control: &ControlProtocol,
        init: Vec<Complex64>,
    ) -> Vec<Complex64> {
        let mut x = init;
        let mut ws = Rk5Workspace::new(x.len());
        let h = control.interval_duration() / self.substeps as f64;
        for &value in control.values() {
            let ham = self.hamiltonian(value);
            let g = StateGenerator { h: &ham };
            for _ in 0..self.substeps {
                rk5_step(&g, &mut x, h, &mut ws);
            }
        }
        x
    }
}

pub(crate) fn check_inputs(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    dim: usize,
    samples_per_interval: usize,
) -> Result<()> {
    spec.validate()?;
    let tol = 1e-12 * spec.t_final.max(1.0);
    if (control.t_final() - spec.t_final).abs() > tol {
        return Err(invalid_argument(format!(
            "control spans T = {} but the instance has T = {}",
            control.t_final(),
            spec.t_final
        )));
    }
    if !control.is_finite() {
        return Err(invalid_argument("control values must be finite"));
    }
    if dim != spec.dim() {
        return Err(invalid_argument(format!(
            "state dimension {dim} does not match N + 1 = {}",
            spec.dim()
        )));
    }
    if samples_per_interval == 0 {
        return Err(invalid_argument("samples_per_interval must be at least 1"));
    }
    Ok(())
}

fn sample_times(control: &ControlProtocol, samples_per_interval: usize) -> Vec<f64> {
    let total = control.n_intervals() * samples_per_interval;
    let t = control.t_final();
    (0..=total)
        .map(|j| {
            if j == total {
                t
            } else {
                t * j as f64 / total as f64
            }
        })
        .collect()
}

pub fn evolve_forward(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    init: &AugmentedState,
    samples_per_interval: usize,
) -> Result<SampledTrajectory<AugmentedState>> {
    evolve_forward_with(
        spec,
        control,
        init,
        samples_per_interval,
        &IntegratorSettings::default(),
    )
}

pub fn evolve_forward_with(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    init: &AugmentedState,
    samples_per_interval: usize,
    settings: &IntegratorSettings,
) -> Result<SampledTrajectory<AugmentedState>> {
    if init.psi1.dim() != init.psi0.dim() {
        return Err(invalid_argument("psi0 and psi1 dimensions differ"));
    }
    check_inputs(spec, control, init.dim(), samples_per_interval)?;
    let ops = SpinOperators::new(spec.n_spins)?;
    let prop = Propagator::new(&ops, spec, control, settings, samples_per_interval);
    let stride = prop.substeps / samples_per_interval;
    let mut states = Vec::with_capacity(control.n_intervals() * samples_per_interval + 1);
    prop.forward(control, init.to_flat(), |node, x| {
        if node % stride == 0 {
            states.push(AugmentedState::from_flat(x));
        }
    });
    Ok(SampledTrajectory {
        times: sample_times(control, samples_per_interval),
        states,
        samples_per_interval,
    })
}

pub fn evolve_costate_backward(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    terminal: &CostatePair,
    samples_per_interval: usize,
) -> Result<SampledTrajectory<CostatePair>> {
    evolve_costate_backward_with(
        spec,
        control,
        terminal,
        samples_per_interval,
        &IntegratorSettings::default(),
    )
}

pub fn evolve_costate_backward_with(
    spec: &ProblemSpec,
    control: &ControlProtocol,
    terminal: &CostatePair,
    samples_per_interval: usize,
    settings: &IntegratorSettings,
) -> Result<SampledTrajectory<CostatePair>> {
    if terminal.pi1.dim() != terminal.pi0.dim() {
        return Err(invalid_argument("pi0 and pi1 dimensions differ"));
    }
    check_inputs(spec, control, terminal.dim(), samples_per_interval)?;
    let ops = SpinOperators::new(spec.n_spins)?;
    let prop = Propagator::new(&ops, spec, control, settings, samples_per_interval);
    let stride = prop.substeps / samples_per_interval;
    let total = control.n_intervals() * samples_per_interval;
    let mut states = vec![CostatePair::zeros(0); total + 1];
    prop.backward(control, terminal.to_flat(), |node, _, x| {
        if node % stride == 0 {
            states[node / stride] = CostatePair::from_flat(x);
        }
    });
    Ok(SampledTrajectory {
        times: sample_times(control, samples_per_interval),
        states,
        samples_per_interval,
    })
}
