//! Per-weight importance scores.
//!
//! Every metric returns a nonnegative matrix with the weights' shape. Larger
//! scores mean more important weights; masking removes the lowest scores
//! first.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrimError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Default relative Hessian damping (fraction of the mean diagonal).
pub const DEFAULT_HESSIAN_DAMPING: f64 = 1e-2;

/// Default GBLM gradient blend coefficient.
pub const DEFAULT_GBLM_BLEND: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMetric {
    Magnitude,
    Wanda,
    SparseGpt,
    Gblm,
}

impl ScoreMetric {
    pub const ALL: [ScoreMetric; 4] = [
        ScoreMetric::Magnitude,
        ScoreMetric::Wanda,
        ScoreMetric::SparseGpt,
        ScoreMetric::Gblm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMetric::Magnitude => "magnitude",
            ScoreMetric::Wanda => "wanda",
            ScoreMetric::SparseGpt => "sparsegpt",
            ScoreMetric::Gblm => "gblm",
        }
    }

    pub fn needs_activations(self) -> bool {
        !matches!(self, ScoreMetric::Magnitude)
    }

    pub fn needs_gradients(self) -> bool {
        matches!(self, ScoreMetric::Gblm)
    }
}

impl fmt::Display for ScoreMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMetric {
    type Err = TrimError;

    fn from_str(s: &str) -> Result<Self> {
        ScoreMetric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrimError::contract(format!("unknown score metric {s:?}")))
    }
}

/// Nonnegative importance scores with the shape of the scored weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T: Scalar> {
    scores: Matrix<T>,
    metric: ScoreMetric,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn new(scores: Matrix<T>, metric: ScoreMetric) -> Result<Self> {
        if scores.as_slice().iter().any(|&v| v < T::zero()) {
            return Err(TrimError::contract("scores must be nonnegative"));
        }
        Ok(ScoreMatrix { scores, metric })
    }

    pub fn scores(&self) -> &Matrix<T> {
        &self.scores
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.scores
    }

    pub fn metric(&self) -> ScoreMetric {
        self.metric
    }

    pub fn shape(&self) -> (usize, usize) {
        self.scores.shape()
    }
}

/// Entrywise gradient magnitudes |dL/dW| plus the GBLM blend coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix<T: Scalar> {
    grads: Matrix<T>,
    blend: f64,
}

impl<T: Scalar> GradientMatrix<T> {
    pub fn new(grads: Matrix<T>, blend: f64) -> Result<Self> {
        if !(blend >= 0.0 && blend.is_finite()) {
            return Err(TrimError::contract(format!("gradient blend must be >= 0, got {blend}")));
        }
        if grads.as_slice().iter().any(|&v| v < T::zero()) {
            return Err(TrimError::contract("gradient magnitudes must be nonnegative"));
        }
        Ok(GradientMatrix { grads, blend })
    }

    pub fn grads(&self) -> &Matrix<T> {
        &self.grads
    }

    pub fn blend(&self) -> f64 {
        self.blend
    }
}

/// Diagonal of the inverse damped Hessian `(X Xᵀ + λ·mean(diag)·I)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianDiag {
    pub inv_diag: Vec<f64>,
    pub damping: f64,
}

fn check_features<T: Scalar>(w: &Matrix<T>, x: &Matrix<T>) -> Result<()> {
    if x.rows() != w.cols() {
        return Err(TrimError::shape(format!(
            "weights have {} input features but activations have {} rows",
            w.cols(),
            x.rows()
        )));
    }
    if x.cols() == 0 {
        return Err(TrimError::shape("activation batch has no samples"));
    }
    Ok(())
}

/// L2 norm of each input feature (row of `x`) across the samples.
pub fn feature_norms<T: Scalar>(x: &Matrix<T>) -> Vec<f64> {
    x.row_norms()
}

fn scored<T: Scalar>(
    w: &Matrix<T>,
    metric: ScoreMetric,
    f: impl Fn(usize, usize, f64) -> f64,
) -> Result<ScoreMatrix<T>> {
    let m = Matrix::from_fn(w.rows(), w.cols(), |i, j| T::narrow(f(i, j, w.get(i, j).widen())))?;
    ScoreMatrix::new(m, metric)
}

/// `A_ij = |W_ij|`.
pub fn score_magnitude<T: Scalar>(w: &Matrix<T>) -> Result<ScoreMatrix<T>> {
    scored(w, ScoreMetric::Magnitude, |_, _, v| v.abs())
}

/// `A_ij = |W_ij| · ‖X_j‖₂`.
pub fn score_wanda<T: Scalar>(w: &Matrix<T>, x: &Matrix<T>) -> Result<ScoreMatrix<T>> {
    check_features(w, x)?;
    let norms = feature_norms(x);
    scored(w, ScoreMetric::Wanda, |_, j, v| v.abs() * norms[j])
}

/// Inverse-Hessian diagonal for `H = X Xᵀ + damping · mean(diag(X Xᵀ)) · I`,
/// via a Cholesky factorization.
pub fn hessian_inverse_diag<T: Scalar>(x: &Matrix<T>, damping: f64) -> Result<HessianDiag> {
    if !(damping > 0.0 && damping.is_finite()) {
        return Err(TrimError::contract(format!("hessian damping must be > 0, got {damping}")));
    }
    let n = x.rows();
    let xf = DMatrix::from_row_slice(n, x.cols(), &x.to_f64_vec());
    let mut h = &xf * xf.transpose();
    let mean_diag = h.diagonal().mean();
    let shift = damping * mean_diag;
    for i in 0..n {
        h[(i, i)] += shift;
    }
    let chol = Cholesky::new(h).ok_or_else(|| {
        TrimError::Numerical(format!(
            "damped hessian is not positive definite (n={n}, mean diag={mean_diag:e}, shift={shift:e})"
        ))
    })?;
    let inv_diag: Vec<f64> = chol.inverse().diagonal().iter().copied().collect();
    if let Some(j) = inv_diag.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(TrimError::Numerical(format!(
            "inverse hessian diagonal entry {j} is {} (mean diag={mean_diag:e})",
            inv_diag[j]
        )));
    }
    Ok(HessianDiag { inv_diag, damping })
}

/// `A_ij = W_ij² / [H⁻¹]_jj`.
pub fn score_sparsegpt<T: Scalar>(w: &Matrix<T>, x: &Matrix<T>, damping: f64) -> Result<ScoreMatrix<T>> {
    check_features(w, x)?;
    let hd = hessian_inverse_diag(x, damping)?;
    scored(w, ScoreMetric::SparseGpt, |_, j, v| v * v / hd.inv_diag[j])
}

/// `A_ij = |W_ij| · (‖X_j‖₂ + α·G_ij)`.
pub fn score_gblm<T: Scalar>(w: &Matrix<T>, x: &Matrix<T>, g: &GradientMatrix<T>) -> Result<ScoreMatrix<T>> {
    check_features(w, x)?;
    if g.grads().shape() != w.shape() {
        return Err(TrimError::shape(format!(
            "gradients {:?} vs weights {:?}",
            g.grads().shape(),
            w.shape()
        )));
    }
    let norms = feature_norms(x);
    let blend = g.blend();
    scored(w, ScoreMetric::Gblm, |i, j, v| {
        v.abs() * (norms[j] + blend * g.grads().get(i, j).widen())
    })
}

/// Inputs for metric dispatch.
#[derive(Debug, Clone, Copy)]
pub struct ScoreInputs<'a, T: Scalar> {
    pub activations: Option<&'a Matrix<T>>,
    pub gradients: Option<&'a GradientMatrix<T>>,
    pub hessian_damping: f64,
}

/// Computes `metric` for one layer.
pub fn score<T: Scalar>(metric: ScoreMetric, w: &Matrix<T>, inputs: ScoreInputs<'_, T>) -> Result<ScoreMatrix<T>> {
    let need_x = || {
        inputs
            .activations
            .ok_or_else(|| TrimError::contract(format!("{metric} needs calibration activations")))
    };
    match metric {
        ScoreMetric::Magnitude => score_magnitude(w),
        ScoreMetric::Wanda => score_wanda(w, need_x()?),
        ScoreMetric::SparseGpt => score_sparsegpt(w, need_x()?, inputs.hessian_damping),
        ScoreMetric::Gblm => {
            let g = inputs
                .gradients
                .ok_or_else(|| TrimError::contract("gblm needs gradients"))?;
            score_gblm(w, need_x()?, g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DetRng;

    fn argsort_row(v: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
        idx
    }

    fn f64_rows<T: Scalar>(m: &Matrix<T>) -> Vec<Vec<f64>> {
        m.rows_iter().map(|r| r.iter().map(|v| v.widen()).collect()).collect()
    }

    #[test]
    fn magnitude_hand_values() {
        let w = Matrix::from_rows(&[[-2.0f32, 3.0]]);
        assert_eq!(score_magnitude(&w).unwrap().scores().as_slice(), &[2.0, 3.0]);
        let z = Matrix::<f32>::zeros(3, 2);
        assert!(score_magnitude(&z).unwrap().scores().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn magnitude_matches_entrywise_abs() {
        let w: Matrix<f32> = DetRng::new(4).gaussian_matrix(4, 4, 1.0);
        let a = score_magnitude(&w).unwrap();
        for (s, v) in a.scores().as_slice().iter().zip(w.as_slice()) {
            assert_eq!(*s, v.abs());
        }
    }

    #[test]
    fn wanda_hand_values() {
        // feature norms (2, 1)
        let w = Matrix::from_rows(&[[1.0f32, -2.0], [3.0, 0.5]]);
        let x = Matrix::from_rows(&[[2.0f32, 0.0], [0.0, 1.0]]);
        let a = score_wanda(&w, &x).unwrap();
        assert_eq!(a.scores().as_slice(), &[2.0, 2.0, 6.0, 0.5]);
    }

    #[test]
    fn wanda_matches_two_pass_oracle() {
        let mut rng = DetRng::new(9);
        let w: Matrix<f32> = rng.gaussian_matrix(6, 10, 1.0);
        let x: Matrix<f32> = rng.gaussian_matrix(10, 32, 1.0);
        let mut norms = vec![0.0f64; 10];
        for (j, n) in norms.iter_mut().enumerate() {
            for l in 0..32 {
                *n += (x.get(j, l) as f64).powi(2);
            }
            *n = n.sqrt();
        }
        let a = score_wanda(&w, &x).unwrap();
        for i in 0..6 {
            for j in 0..10 {
                let e = (w.get(i, j) as f64).abs() * norms[j];
                let g = a.scores().get(i, j) as f64;
                assert!((g - e).abs() <= 1e-6 * e.max(1.0));
            }
        }
    }

    #[test]
    fn wanda_equal_norms_matches_magnitude_ranking() {
        let mut rng = DetRng::new(2);
        let w: Matrix<f64> = rng.gaussian_matrix(5, 6, 1.0);
        // every feature row has norm 2
        let x = Matrix::from_fn(6, 4, |_, l| if l % 2 == 0 { 1.0f64 } else { -1.0 }).unwrap();
        let wa = f64_rows(score_wanda(&w, &x).unwrap().scores());
        let ma = f64_rows(score_magnitude(&w).unwrap().scores());
        for (a, b) in wa.iter().zip(&ma) {
            assert_eq!(argsort_row(a), argsort_row(b));
        }
    }

    #[test]
    fn wanda_rejects_feature_mismatch() {
        let w = Matrix::<f32>::zeros(2, 3);
        let x = Matrix::<f32>::zeros(4, 5);
        assert!(matches!(score_wanda(&w, &x), Err(TrimError::Shape(_))));
    }

    /// Gauss–Jordan inverse with partial pivoting.
    fn explicit_inverse(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut inv: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
            a.swap(c, p);
            inv.swap(c, p);
            let d = a[c][c];
            for j in 0..n {
                a[c][j] /= d;
                inv[c][j] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = a[r][c];
                    for j in 0..n {
                        a[r][j] -= f * a[c][j];
                        inv[r][j] -= f * inv[c][j];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn sparsegpt_matches_explicit_inverse_oracle() {
        let mut rng = DetRng::new(21);
        let w: Matrix<f64> = rng.gaussian_matrix(3, 3, 1.0);
        let x: Matrix<f64> = rng.gaussian_matrix(3, 8, 1.0);
        let damping = 0.01;
        let mut h = vec![vec![0.0; 3]; 3];
        for (i, hi) in h.iter_mut().enumerate() {
            for (j, hij) in hi.iter_mut().enumerate() {
                *hij = (0..8).map(|l| x.get(i, l) * x.get(j, l)).sum();
            }
        }
        let mean_diag = (0..3).map(|i| h[i][i]).sum::<f64>() / 3.0;
        for (i, hi) in h.iter_mut().enumerate() {
            hi[i] += damping * mean_diag;
        }
        let inv = explicit_inverse(h);
        let a = score_sparsegpt(&w, &x, damping).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = w.get(i, j).powi(2) / inv[j][j];
                let g = a.scores().get(i, j);
                assert!((g - e).abs() <= 1e-9 * e.max(1.0), "{g} vs {e}");
            }
        }
    }

    #[test]
    fn sparsegpt_orthogonal_inputs_match_magnitude_ranking() {
        let mut rng = DetRng::new(8);
        let w: Matrix<f64> = rng.gaussian_matrix(4, 4, 1.0);
        // orthogonal rows with equal norm 3
        let x = Matrix::from_fn(4, 4, |i, l| if i == l { 3.0 } else { 0.0 }).unwrap();
        let sa = f64_rows(score_sparsegpt(&w, &x, 0.01).unwrap().scores());
        let ma = f64_rows(score_magnitude(&w).unwrap().scores());
        for (a, b) in sa.iter().zip(&ma) {
            assert_eq!(argsort_row(a), argsort_row(b));
        }
    }

    #[test]
    fn sparsegpt_rejects_zero_damping() {
        let w = Matrix::<f32>::zeros(2, 2);
        let x = Matrix::<f32>::identity(2);
        assert!(matches!(score_sparsegpt(&w, &x, 0.0), Err(TrimError::Contract(_))));
    }

    #[test]
    fn sparsegpt_large_damping_tends_to_magnitude_squared_ranking() {
        let mut rng = DetRng::new(31);
        let w: Matrix<f64> = rng.gaussian_matrix(5, 6, 1.0);
        let x: Matrix<f64> = rng.gaussian_matrix(6, 12, 1.0);
        let sa = f64_rows(score_sparsegpt(&w, &x, 1e9).unwrap().scores());
        let ma = f64_rows(score_magnitude(&w).unwrap().scores());
        for (a, b) in sa.iter().zip(&ma) {
            assert_eq!(argsort_row(a), argsort_row(b));
        }
    }

    #[test]
    fn gblm_hand_and_degenerate() {
        let w = Matrix::from_rows(&[[1.0f32]]);
        let x = Matrix::from_rows(&[[2.0f32]]);
        let g = GradientMatrix::new(Matrix::from_rows(&[[3.0f32]]), 1.0).unwrap();
        assert_eq!(score_gblm(&w, &x, &g).unwrap().scores().as_slice(), &[5.0]);

        let mut rng = DetRng::new(12);
        let w: Matrix<f32> = rng.gaussian_matrix(4, 5, 1.0);
        let x: Matrix<f32> = rng.gaussian_matrix(5, 7, 1.0);
        let gm = rng.gaussian_matrix::<f32>(4, 5, 1.0).map(f32::abs).unwrap();
        let g0 = GradientMatrix::new(gm.clone(), 0.0).unwrap();
        assert_eq!(
            score_gblm(&w, &x, &g0).unwrap().scores(),
            score_wanda(&w, &x).unwrap().scores()
        );

        // compose-of-parts oracle
        let g = GradientMatrix::new(gm.clone(), 0.5).unwrap();
        let got = score_gblm(&w, &x, &g).unwrap();
        let norms: Vec<f64> = (0..5)
            .map(|j| (0..7).map(|l| (x.get(j, l) as f64).powi(2)).sum::<f64>().sqrt())
            .collect();
        for i in 0..4 {
            for j in 0..5 {
                let e = (w.get(i, j) as f64).abs() * (norms[j] + 0.5 * gm.get(i, j) as f64);
                assert!((got.scores().get(i, j) as f64 - e).abs() <= 1e-6 * e.max(1.0));
            }
        }
    }

    #[test]
    fn gblm_rejects_negative_blend_and_shape_mismatch() {
        assert!(GradientMatrix::new(Matrix::<f32>::zeros(1, 1), -1.0).is_err());
        let w = Matrix::<f32>::zeros(2, 2);
        let x = Matrix::<f32>::identity(2);
        let g = GradientMatrix::new(Matrix::<f32>::zeros(2, 3), 1.0).unwrap();
        assert!(matches!(score_gblm(&w, &x, &g), Err(TrimError::Shape(_))));
    }

    #[test]
    fn metric_tokens_round_trip() {
        for m in ScoreMetric::ALL {
            assert_eq!(m.as_str().parse::<ScoreMetric>().unwrap(), m);
        }
        assert!("owl".parse::<ScoreMetric>().is_err());
    }
}
