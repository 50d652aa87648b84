//! Collective spin-`J` operators (`J = N/2`) in the `Jz` eigenbasis.
//!
//! Basis index `k` carries `m = J - k`, so index 0 is `m = +J` and the last
//! index is `m = -J`. `Jz` and `Jz²` are diagonal and `Jx` is real symmetric
//! tridiagonal; all three are stored in compressed form and applied without
//! building dense matrices.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::state::StateVector;

#[derive(Debug, Clone, PartialEq)]
pub struct SpinOperators {
    n_spins: usize,
    jz: Vec<f64>,
    jz2: Vec<f64>,
    /// `jx_off[k] = ⟨k|Jx|k+1⟩ = ⟨k+1|Jx|k⟩`.
    jx_off: Vec<f64>,
}

impl SpinOperators {
    pub fn new(n_spins: usize) -> Result<Self> {
        if n_spins == 0 {
            return Err(Error::InvalidInstance("n_spins must be at least 1".into()));
        }
        let j = n_spins as f64 / 2.0;
        let dim = n_spins + 1;
        let jz: Vec<f64> = (0..dim).map(|k| j - k as f64).collect();
        let jz2 = jz.iter().map(|m| m * m).collect();
        let jx_off = jz[..dim - 1]
            .iter()
            .map(|&m| 0.5 * (j * (j + 1.0) - m * (m - 1.0)).sqrt())
            .collect();
        Ok(Self {
            n_spins,
            jz,
            jz2,
            jx_off,
        })
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn dim(&self) -> usize {
        self.n_spins + 1
    }

    /// Total spin `J = N/2`.
    pub fn spin(&self) -> f64 {
        self.n_spins as f64 / 2.0
    }

    /// Diagonal of `Jz`, i.e. the `m` value of each basis index.
    pub fn jz(&self) -> &[f64] {
        &self.jz
    }

    pub fn jz2(&self) -> &[f64] {
        &self.jz2
    }

    pub fn jx_offdiag(&self) -> &[f64] {
        &self.jx_off
    }

    /// `out = Jx · x`.
    pub fn apply_jx(&self, x: &[Complex64], out: &mut [Complex64]) {
        apply_tridiagonal(&[], &self.jx_off, x, out);
    }

    pub fn jx_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for (k, &v) in self.jx_off.iter().enumerate() {
            m[(k, k + 1)] = v;
            m[(k + 1, k)] = v;
        }
        m
    }

    pub fn jz_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.jz))
    }

    pub fn jz2_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.jz2))
    }

    /// `Jy = (J+ - J-) / 2i`, built from the ladder operators.
    pub fn jy_matrix(&self) -> DMatrix<Complex64> {
        let d = self.dim();
        let j = self.spin();
        let mut m = DMatrix::from_element(d, d, Complex64::new(0.0, 0.0));
        for k in 0..d - 1 {
            // J+ |m_{k+1}⟩ = c |m_k⟩
            let mk1 = self.jz[k + 1];
            let c = (j * (j + 1.0) - mk1 * (mk1 + 1.0)).sqrt();
            m[(k, k + 1)] = Complex64::new(0.0, -0.5 * c);
            m[(k + 1, k)] = Complex64::new(0.0, 0.5 * c);
        }
        m
    }
}

/// `out = (diag + offdiag + offdiagᵀ) · x` for a real symmetric tridiagonal
/// matrix. An empty `diag` means a zero diagonal.
pub(crate) fn apply_tridiagonal(
    diag: &[f64],
    off: &[f64],
    x: &[Complex64],
    out: &mut [Complex64],
) {
    let d = x.len();
    debug_assert_eq!(out.len(), d);
    debug_assert_eq!(off.len() + 1, d);
    if diag.is_empty() {
        out.iter_mut().for_each(|o| *o = Complex64::new(0.0, 0.0));
    } else {
        for k in 0..d {
            out[k] = x[k] * diag[k];
        }
    }
    for k in 0..d - 1 {
        let a = off[k];
        out[k] += x[k + 1] * a;
        out[k + 1] += x[k] * a;
    }
}

pub fn build_operators(n_spins: usize) -> Result<SpinOperators> {
    SpinOperators::new(n_spins)
}

/// Top eigenvector of `Jx` (all spins along +x), with real non-negative
/// amplitudes `sqrt(C(N, k)) / 2^(N/2)`.
pub fn coherent_x_state(n_spins: usize) -> Result<StateVector> {
    if n_spins == 0 {
        return Err(Error::InvalidInstance("n_spins must be at least 1".into()));
    }
    let n = n_spins as f64;
    let half_ln2n = 0.5 * n * std::f64::consts::LN_2;
    let mut ln_binom = 0.0;
    let mut amps = Vec::with_capacity(n_spins + 1);
    for k in 0..=n_spins {
        if k > 0 {
            ln_binom += ((n_spins - k + 1) as f64).ln() - (k as f64).ln();
        }
        amps.push((0.5 * ln_binom - half_ln2n).exp());
    }
    Ok(StateVector::from_real(&amps))
}

/// `(|+J⟩ + |-J⟩)/√2`, the state that reaches the Heisenberg limit under free
/// evolution.
pub fn hl_state(n_spins: usize) -> Result<StateVector> {
    if n_spins == 0 {
        return Err(Error::InvalidInstance("n_spins must be at least 1".into()));
    }
    let mut v = StateVector::zeros(n_spins + 1);
    let a = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    v[0] = a;
    v[n_spins] = a;
    Ok(v)
}

/// Eigendecomposition of `Jx`. Row `r` of `u` is the eigenvector with
/// eigenvalue `eigenvalues[r]`, rows sorted by descending eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigensystem {
    pub u: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

pub fn jx_eigensystem(n_spins: usize) -> Result<Eigensystem> {
    let ops = SpinOperators::new(n_spins)?;
    let d = ops.dim();
    let eig = SymmetricEigen::new(ops.jx_matrix());

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut u = DMatrix::zeros(d, d);
    let mut eigenvalues = Vec::with_capacity(d);
    for (r, &c) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(c);
        let scale = col.amax();
        let lead = col
            .iter()
            .copied()
            .find(|x| x.abs() > 1e-8 * scale)
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for k in 0..d {
            u[(r, k)] = sign * col[k];
        }
        eigenvalues.push(eig.eigenvalues[c]);
    }
    Ok(Eigensystem { u, eigenvalues })
}
