//! Complex amplitude vectors in the `Jz` basis, ordered `m = +N/2 .. -N/2`.

use std::ops::{Deref, DerefMut};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub Vec<Complex64>);

impl StateVector {
    pub fn new(amplitudes: Vec<Complex64>) -> Self {
        Self(amplitudes)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![Complex64::new(0.0, 0.0); dim])
    }

    pub fn from_real(values: &[f64]) -> Self {
        Self(values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `⟨self|other⟩`, antilinear in `self`.
    pub fn inner(&self, other: &[Complex64]) -> Complex64 {
        inner(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        norm_sqr(&self.0).sqrt()
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        Self(self.0.iter().map(|&a| a * factor).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.re.is_finite() && a.im.is_finite())
    }
}

impl Deref for StateVector {
    type Target = [Complex64];

    fn deref(&self) -> &[Complex64] {
        &self.0
    }
}

impl DerefMut for StateVector {
    fn deref_mut(&mut self) -> &mut [Complex64] {
        &mut self.0
    }
}

impl From<Vec<Complex64>> for StateVector {
    fn from(v: Vec<Complex64>) -> Self {
        Self(v)
    }
}

pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(Complex64::new(0.0, 0.0), |acc, (x, y)| acc + x.conj() * y)
}

pub fn norm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

pub fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inner_is_antilinear_in_bra() {
        let a = StateVector::new(vec![Complex64::new(0.0, 1.0), Complex64::new(1.0, 0.0)]);
        let b = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 2.0)];
        // conj(i)*1 + 1*(2i) = -i + 2i = i
        assert_eq!(a.inner(&b), Complex64::new(0.0, 1.0));
        assert!((a.norm() - 2f64.sqrt()).abs() < 1e-15);
    }
}
