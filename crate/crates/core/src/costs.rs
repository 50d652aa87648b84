//! Terminal costs and the costate boundary conditions they induce.
//!
//! Costs are minimized; each boundary condition is the Wirtinger derivative
//! `∂C/∂⟨ψ(T)|` of the internal cost. The user-facing objectives are
//!
//! * QFI `= 4(⟨ψ1|ψ1⟩ - |⟨ψ0|ψ1⟩|²)`, internal cost `C_Q = -QFI/4`;
//! * CFI `= Σ_m (∂ωP_m)² / P_m` for a rotated `Jx` measurement, cost `-CFI`;
//! * fidelity `|⟨target|ψ0(T)⟩|²`, cost `-fidelity`.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AugmentedState, CostatePair};
use crate::spin::Eigensystem;
use crate::state::{StateVector, inner, norm_sqr};

/// Probabilities below this are replaced by it in CFI denominators.
pub const DEFAULT_CFI_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CostKind {
    Qfi,
    /// CFI of a `Jx` measurement after the phase offset `exp(iφJz)`.
    Cfi { phase: f64 },
    Fidelity { target: StateVector },
}

impl CostKind {
    pub fn cfi(phase: f64) -> Self {
        CostKind::Cfi {
            phase: normalize_phase(phase),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CostKind::Qfi => "qfi",
            CostKind::Cfi { .. } => "cfi",
            CostKind::Fidelity { .. } => "fidelity",
        }
    }
}

/// Maps `φ` into `[0, 2π)`.
pub fn normalize_phase(phase: f64) -> f64 {
    let p = phase.rem_euclid(TAU);
    if p >= TAU { 0.0 } else { p }
}

/// `P_m` and `∂ωP_m`, indexed like the rows of the `Jx` eigensystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementDistribution {
    pub p: Vec<f64>,
    pub dp_domega: Vec<f64>,
}

pub fn qfi_value(final_state: &AugmentedState) -> f64 {
    -4.0 * qfi_cost(final_state)
}

/// `C_Q = -(⟨ψ1|ψ1⟩ - |⟨ψ1|ψ0⟩|²)`.
pub fn qfi_cost(final_state: &AugmentedState) -> f64 {
    let overlap = inner(&final_state.psi1, &final_state.psi0);
    -(norm_sqr(&final_state.psi1) - overlap.norm_sqr())
}

/// `π0(T) = |ψ1⟩⟨ψ1|ψ0⟩`, `π1(T) = -|ψ1⟩ + |ψ0⟩⟨ψ0|ψ1⟩`.
pub fn qfi_costate_boundary(final_state: &AugmentedState) -> CostatePair {
    let psi0 = &final_state.psi0;
    let psi1 = &final_state.psi1;
    let c10 = inner(psi1, psi0);
    let c01 = c10.conj();
    let pi0 = psi1.iter().map(|b| b * c10).collect();
    let pi1 = psi1
        .iter()
        .zip(psi0.iter())
        .map(|(b, a)| -b + a * c01)
        .collect();
    CostatePair {
        pi0: StateVector::new(pi0),
        pi1: StateVector::new(pi1),
    }
}

/// Amplitudes of `exp(iφJz)|ψ⟩` in the `Jx` eigenbasis:
/// `Σ_n U_{mn} e^{i m_n φ} ψ_n`.
fn rotated_amplitudes(psi: &[Complex64], eig: &Eigensystem, phases: &[Complex64]) -> Vec<Complex64> {
    let d = psi.len();
    let shifted: Vec<Complex64> = psi.iter().zip(phases).map(|(a, p)| a * p).collect();
    (0..d)
        .map(|m| {
            let row = eig.u.row(m);
            shifted
                .iter()
                .zip(row.iter())
                .fold(Complex64::new(0.0, 0.0), |acc, (s, u)| acc + s * *u)
        })
        .collect()
}

fn phase_factors(m_values: impl Iterator<Item = f64>, phase: f64) -> Vec<Complex64> {
    m_values.map(|m| Complex64::from_polar(1.0, m * phase)).collect()
}

/// `m` quantum numbers of the z-basis indices, `J - k`.
fn z_quantum_numbers(dim: usize) -> impl Iterator<Item = f64> {
    let j = (dim - 1) as f64 / 2.0;
    (0..dim).map(move |k| j - k as f64)
}

struct RotatedFinal {
    alpha: Vec<Complex64>,
    beta: Vec<Complex64>,
    /// `e^{-i m_n φ}`, the conjugate phase factors.
    conj_phases: Vec<Complex64>,
}

fn rotate(final_state: &AugmentedState, eig: &Eigensystem, phase: f64) -> RotatedFinal {
    let phases = phase_factors(z_quantum_numbers(final_state.dim()), phase);
    let alpha = rotated_amplitudes(&final_state.psi0, eig, &phases);
    let beta = rotated_amplitudes(&final_state.psi1, eig, &phases);
    RotatedFinal {
        alpha,
        beta,
        conj_phases: phases.iter().map(|p| p.conj()).collect(),
    }
}

pub fn measurement_distribution(
    final_state: &AugmentedState,
    eig: &Eigensystem,
    phase: f64,
) -> MeasurementDistribution {
    let r = rotate(final_state, eig, phase);
    distribution_of(&r)
}

fn distribution_of(r: &RotatedFinal) -> MeasurementDistribution {
    let p = r.alpha.iter().map(|a| a.norm_sqr()).collect();
    let dp_domega = r
        .alpha
        .iter()
        .zip(&r.beta)
        .map(|(a, b)| 2.0 * (b.conj() * a).re)
        .collect();
    MeasurementDistribution { p, dp_domega }
}

pub fn cfi_value(dist: &MeasurementDistribution) -> f64 {
    cfi_value_clamped(dist, DEFAULT_CFI_CLAMP)
}

pub fn cfi_value_clamped(dist: &MeasurementDistribution, clamp: f64) -> f64 {
    dist.p
        .iter()
        .zip(&dist.dp_domega)
        .map(|(p, dp)| dp * dp / p.max(clamp))
        .sum()
}

/// Costate boundary for `C = -CFI` and the ascent direction `∂CFI/∂φ`.
pub fn cfi_costate_boundary(
    final_state: &AugmentedState,
    eig: &Eigensystem,
    phase: f64,
) -> (CostatePair, f64) {
    cfi_costate_boundary_clamped(final_state, eig, phase, DEFAULT_CFI_CLAMP)
}

/// As [`cfi_costate_boundary`]. Clamped outcomes use `clamp` as their
/// denominator, which is constant, so they drop the `∂P_m` term.
pub fn cfi_costate_boundary_clamped(
    final_state: &AugmentedState,
    eig: &Eigensystem,
    phase: f64,
    clamp: f64,
) -> (CostatePair, f64) {
    let d = final_state.dim();
    let r = rotate(final_state, eig, phase);
    let dist = distribution_of(&r);
    let m_z: Vec<f64> = z_quantum_numbers(d).collect();

    // Per-outcome weights: ∂F/∂P_m and ∂F/∂(∂ωP_m).
    let mut w_p = vec![0.0; d];
    let mut w_dp = vec![0.0; d];
    for m in 0..d {
        let (p, dp) = (dist.p[m], dist.dp_domega[m]);
        if p >= clamp {
            w_p[m] = -(dp * dp) / (p * p);
            w_dp[m] = 2.0 * dp / p;
        } else {
            w_dp[m] = 2.0 * dp / clamp;
        }
    }

    // ∂F/∂ᾱ_n* = Σ_m U_{mn} e^{-i m_n φ} (w_p α_m + w_dp β_m)
    // ∂F/∂β̄_n* = Σ_m U_{mn} e^{-i m_n φ} w_dp α_m
    let mut pi0 = StateVector::zeros(d);
    let mut pi1 = StateVector::zeros(d);
    for n in 0..d {
        let mut ga = Complex64::new(0.0, 0.0);
        let mut gb = Complex64::new(0.0, 0.0);
        for m in 0..d {
            let u = eig.u[(m, n)];
            ga += (r.alpha[m] * w_p[m] + r.beta[m] * w_dp[m]) * u;
            gb += r.alpha[m] * (w_dp[m] * u);
        }
        pi0[n] = -ga * r.conj_phases[n];
        pi1[n] = -gb * r.conj_phases[n];
    }

    // ∂α_m/∂φ = Σ_n U_{mn} (i m_n) e^{i m_n φ} ψ0_n, likewise for β.
    let i = Complex64::new(0.0, 1.0);
    let weighted = |psi: &[Complex64]| -> Vec<Complex64> {
        psi.iter()
            .zip(&m_z)
            .zip(&r.conj_phases)
            .map(|((a, m), cp)| a * i * *m * cp.conj())
            .collect()
    };
    let dalpha = apply_u(eig, &weighted(&final_state.psi0));
    let dbeta = apply_u(eig, &weighted(&final_state.psi1));
    let mut d_phase = 0.0;
    for m in 0..d {
        let dp_dphi = 2.0 * (r.alpha[m].conj() * dalpha[m]).re;
        let ddp_dphi = 2.0 * (r.beta[m].conj() * dalpha[m] + dbeta[m].conj() * r.alpha[m]).re;
        d_phase += w_p[m] * dp_dphi + w_dp[m] * ddp_dphi;
    }
    (CostatePair { pi0, pi1 }, d_phase)
}

fn apply_u(eig: &Eigensystem, x: &[Complex64]) -> Vec<Complex64> {
    (0..x.len())
        .map(|m| {
            eig.u
                .row(m)
                .iter()
                .zip(x)
                .fold(Complex64::new(0.0, 0.0), |acc, (u, v)| acc + v * *u)
        })
        .collect()
}

pub fn fidelity_value(psi0: &[Complex64], target: &[Complex64]) -> f64 {
    inner(target, psi0).norm_sqr()
}

/// `π0(T) = -|target⟩⟨target|ψ0(T)⟩`, `π1(T) = 0`.
pub fn fidelity_costate_boundary(psi0: &[Complex64], target: &[Complex64]) -> CostatePair {
    let overlap = inner(target, psi0);
    CostatePair {
        pi0: StateVector::new(target.iter().map(|t| -t * overlap).collect()),
        pi1: StateVector::zeros(psi0.len()),
    }
}
