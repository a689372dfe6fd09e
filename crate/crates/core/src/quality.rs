//! Reconstruction quality between a dense output `Y` and a pruned output
//! `Ŷ`, both `D × L` (rows = output dimensions, columns = samples).
//!
//! Every metric is oriented so that larger is better. Mean squared error is
//! therefore reported negated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrimError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Upper bound on reported PSNR (dB), reached when a row is reproduced
/// exactly.
pub const PSNR_CAP_DB: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerMetric {
    #[default]
    CosimFlat,
    CosimSample,
    NegMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DimMetric {
    #[default]
    Cosine,
    Psnr,
    NegMse,
}

impl LayerMetric {
    pub const ALL: [LayerMetric; 3] = [LayerMetric::CosimFlat, LayerMetric::CosimSample, LayerMetric::NegMse];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerMetric::CosimFlat => "cosim_flat",
            LayerMetric::CosimSample => "cosim_sample",
            LayerMetric::NegMse => "neg_mse",
        }
    }
}

impl DimMetric {
    pub const ALL: [DimMetric; 3] = [DimMetric::Cosine, DimMetric::Psnr, DimMetric::NegMse];

    pub fn as_str(self) -> &'static str {
        match self {
            DimMetric::Cosine => "cosine",
            DimMetric::Psnr => "psnr",
            DimMetric::NegMse => "neg_mse",
        }
    }
}

macro_rules! token_impls {
    ($t:ty, $what:literal) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $t {
            type Err = TrimError;

            fn from_str(s: &str) -> Result<Self> {
                <$t>::ALL
                    .into_iter()
                    .find(|m| m.as_str() == s)
                    .ok_or_else(|| TrimError::contract(format!(concat!("unknown ", $what, " {:?}"), s)))
            }
        }
    };
}

token_impls!(LayerMetric, "layer metric");
token_impls!(DimMetric, "dimension metric");

/// Whole-layer quality value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerQuality {
    pub value: f64,
    pub metric: LayerMetric,
}

/// Per-output-dimension quality values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimQualityVector {
    pub values: Vec<f64>,
    pub metric: DimMetric,
}

/// Cosine similarity in `f64` with the zero-vector convention: 1 when both
/// vectors are zero, 0 when exactly one is.
pub fn cosine(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    }
}

fn check_shapes<T: Scalar>(y: &Matrix<T>, yhat: &Matrix<T>) -> Result<()> {
    if y.shape() != yhat.shape() {
        return Err(TrimError::shape(format!(
            "quality inputs {:?} vs {:?}",
            y.shape(),
            yhat.shape()
        )));
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Layer-level quality of `yhat` against `y`.
pub fn qmetric<T: Scalar>(y: &Matrix<T>, yhat: &Matrix<T>, metric: LayerMetric) -> Result<LayerQuality> {
    check_shapes(y, yhat)?;
    let yv = y.to_f64_vec();
    let hv = yhat.to_f64_vec();
    let value = match metric {
        LayerMetric::CosimFlat => cosine(yv.iter().copied(), hv.iter().copied()),
        LayerMetric::CosimSample => {
            let (d, l) = y.shape();
            if l == 0 {
                1.0
            } else {
                (0..l)
                    .map(|c| {
                        cosine(
                            (0..d).map(|r| yv[r * l + c]),
                            (0..d).map(|r| hv[r * l + c]),
                        )
                    })
                    .sum::<f64>()
                    / l as f64
            }
        }
        LayerMetric::NegMse => -mse(&yv, &hv),
    };
    if !value.is_finite() {
        return Err(TrimError::Numerical(format!("{metric} is not finite")));
    }
    Ok(LayerQuality { value, metric })
}

/// Per-row quality of `yhat` against `y` over the sample axis.
///
/// PSNR uses the largest absolute entry of the whole `y` as its peak and is
/// clamped to `[-PSNR_CAP_DB, PSNR_CAP_DB]`.
pub fn qmetric_dimwise<T: Scalar>(y: &Matrix<T>, yhat: &Matrix<T>, metric: DimMetric) -> Result<DimQualityVector> {
    check_shapes(y, yhat)?;
    let peak = y.max_abs();
    let values: Vec<f64> = y
        .rows_iter()
        .zip(yhat.rows_iter())
        .map(|(a, b)| {
            let a: Vec<f64> = a.iter().map(|v| v.widen()).collect();
            let b: Vec<f64> = b.iter().map(|v| v.widen()).collect();
            match metric {
                DimMetric::Cosine => cosine(a.iter().copied(), b.iter().copied()),
                DimMetric::NegMse => -mse(&a, &b),
                DimMetric::Psnr => {
                    let e = mse(&a, &b);
                    if e == 0.0 {
                        PSNR_CAP_DB
                    } else {
                        let v = 10.0 * (peak * peak / e).log10();
                        if v.is_nan() {
                            -PSNR_CAP_DB
                        } else {
                            v.clamp(-PSNR_CAP_DB, PSNR_CAP_DB)
                        }
                    }
                }
            }
        })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TrimError::Numerical(format!("{metric} produced a non-finite value")));
    }
    Ok(DimQualityVector { values, metric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DetRng;

    fn pair(seed: u64, d: usize, l: usize) -> (Matrix<f64>, Matrix<f64>) {
        let mut rng = DetRng::new(seed);
        (rng.gaussian_matrix(d, l, 1.0), rng.gaussian_matrix(d, l, 1.0))
    }

    #[test]
    fn identity_is_maximal() {
        let (y, _) = pair(1, 4, 8);
        assert!((qmetric(&y, &y, LayerMetric::CosimFlat).unwrap().value - 1.0).abs() < 1e-12);
        assert!((qmetric(&y, &y, LayerMetric::CosimSample).unwrap().value - 1.0).abs() < 1e-12);
        assert_eq!(qmetric(&y, &y, LayerMetric::NegMse).unwrap().value, 0.0);
        let c = qmetric_dimwise(&y, &y, DimMetric::Cosine).unwrap();
        assert!(c.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let p = qmetric_dimwise(&y, &y, DimMetric::Psnr).unwrap();
        assert!(p.values.iter().all(|&v| v == PSNR_CAP_DB));
    }

    #[test]
    fn antipodal_is_minus_one() {
        let (y, _) = pair(2, 3, 5);
        let neg = y.map(|v| -v).unwrap();
        assert!((qmetric(&y, &neg, LayerMetric::CosimFlat).unwrap().value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosim_sample_matches_column_loop() {
        let (y, h) = pair(3, 4, 8);
        let mut acc = 0.0;
        for c in 0..8 {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for r in 0..4 {
                dot += y.get(r, c) * h.get(r, c);
                na += y.get(r, c).powi(2);
                nb += h.get(r, c).powi(2);
            }
            acc += dot / (na.sqrt() * nb.sqrt());
        }
        let got = qmetric(&y, &h, LayerMetric::CosimSample).unwrap().value;
        assert!((got - acc / 8.0).abs() < 1e-6);
    }

    #[test]
    fn dimwise_matches_row_loop() {
        let (y, h) = pair(4, 5, 16);
        let peak = y.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cos = qmetric_dimwise(&y, &h, DimMetric::Cosine).unwrap().values;
        let neg = qmetric_dimwise(&y, &h, DimMetric::NegMse).unwrap().values;
        let psnr = qmetric_dimwise(&y, &h, DimMetric::Psnr).unwrap().values;
        for r in 0..5 {
            let (mut dot, mut na, mut nb, mut se) = (0.0, 0.0, 0.0, 0.0);
            for c in 0..16 {
                let (a, b) = (y.get(r, c), h.get(r, c));
                dot += a * b;
                na += a * a;
                nb += b * b;
                se += (a - b) * (a - b);
            }
            assert!((cos[r] - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-6);
            assert!((neg[r] + se / 16.0).abs() < 1e-6);
            assert!((psnr[r] - 10.0 * (peak * peak / (se / 16.0)).log10()).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroed_row_has_zero_cosine() {
        let y = Matrix::from_rows(&[[1.0f32, 2.0], [3.0, 4.0]]);
        let h = Matrix::from_rows(&[[1.0f32, 2.0], [0.0, 0.0]]);
        let c = qmetric_dimwise(&y, &h, DimMetric::Cosine).unwrap().values;
        assert_eq!(c[1], 0.0);
        let z = Matrix::<f32>::zeros(2, 2);
        assert_eq!(qmetric_dimwise(&z, &z, DimMetric::Cosine).unwrap().values, vec![1.0, 1.0]);
    }

    #[test]
    fn scale_behaviour() {
        let (y, h) = pair(5, 3, 6);
        let ys = y.map(|v| v * 3.0).unwrap();
        let hs = h.map(|v| v * 3.0).unwrap();
        let a = qmetric(&y, &h, LayerMetric::CosimFlat).unwrap().value;
        let b = qmetric(&ys, &hs, LayerMetric::CosimFlat).unwrap().value;
        assert!((a - b).abs() < 1e-12);
        let a = qmetric(&y, &h, LayerMetric::NegMse).unwrap().value;
        let b = qmetric(&ys, &hs, LayerMetric::NegMse).unwrap().value;
        assert!((9.0 * a - b).abs() < 1e-9);
    }

    #[test]
    fn dimwise_mean_equals_sample_cosine_on_transpose() {
        let (y, h) = pair(6, 4, 7);
        let dim = qmetric_dimwise(&y, &h, DimMetric::Cosine).unwrap().values;
        let mean = dim.iter().sum::<f64>() / dim.len() as f64;
        let sample = qmetric(&y.transpose(), &h.transpose(), LayerMetric::CosimSample)
            .unwrap()
            .value;
        assert!((mean - sample).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(3, 2);
        assert!(qmetric(&a, &b, LayerMetric::CosimFlat).is_err());
        assert!(qmetric_dimwise(&a, &b, DimMetric::Cosine).is_err());
    }

    #[test]
    fn tokens() {
        for m in LayerMetric::ALL {
            assert_eq!(m.as_str().parse::<LayerMetric>().unwrap(), m);
        }
        for m in DimMetric::ALL {
            assert_eq!(m.as_str().parse::<DimMetric>().unwrap(), m);
        }
        assert!("psnr".parse::<LayerMetric>().is_err());
    }
}
