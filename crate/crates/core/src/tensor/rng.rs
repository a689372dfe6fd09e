//! Seeded random number generation.
//!
//! Uniform bits come from ChaCha8 seeded with a 64-bit value. Gaussian
//! samples use the Box–Muller transform on pairs of 53-bit uniforms, so a
//! given seed yields the same matrices on every platform and run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::scalar::Scalar;

/// 64-bit experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// Deterministic generator used throughout the crate.
#[derive(Debug, Clone)]
pub struct DetRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl DetRng {
    pub fn new(seed: impl Into<Seed>) -> Self {
        DetRng {
            inner: ChaCha8Rng::seed_from_u64(seed.into().0),
            spare: None,
        }
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.gen::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Panics when n = 0.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    /// Standard normal sample (Box–Muller).
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.gaussian() * std).collect()
    }

    /// Matrix with i.i.d. N(0, std²) entries, filled in row-major order.
    pub fn gaussian_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<T> {
        let data = (0..rows * cols)
            .map(|_| T::narrow(self.gaussian() * std))
            .collect();
        Matrix::from_vec(rows, cols, data).expect("gaussian samples are finite")
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<E>(&mut self, items: &mut [E]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in selection order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k.min(n));
        idx
    }
}
