//! Layer-wise sparsity budgets.
//!
//! An outlier position is a score `A_ij > M · mean(A)`. The outlier-weighted
//! allocator gives layers with more outliers a lower sparsity, staying
//! within `[T − λ, T + λ]` and keeping the parameter-weighted mean at `T`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::budget::project_weighted_mean;
use crate::error::{Result, TrimError};
use crate::masking::DEFAULT_CUTOFF;
use crate::scalar::Scalar;
use crate::scoring::ScoreMatrix;
use crate::tensor::write_atomic;

pub const DEFAULT_OWL_M: f64 = 5.0;
pub const DEFAULT_OWL_LAMBDA: f64 = 0.12;

/// Floor for the ratio spread in the affine map.
const RATIO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationMethod {
    Uniform,
    Owl,
    /// Ratios computed elsewhere and loaded from a file.
    External,
}

impl AllocationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AllocationMethod::Uniform => "uniform",
            AllocationMethod::Owl => "owl",
            AllocationMethod::External => "external",
        }
    }
}

impl fmt::Display for AllocationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AllocationMethod {
    type Err = TrimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AllocationMethod::Uniform),
            "owl" => Ok(AllocationMethod::Owl),
            "external" => Ok(AllocationMethod::External),
            _ => Err(TrimError::contract(format!("unknown allocation method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerBudget {
    pub name: String,
    pub t: f64,
    pub params: u64,
}

/// Per-layer sparsity targets with a global budget.
///
/// Serialized as `{"method", "global_t", "layers": [{"name", "t", "params"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerAllocation {
    pub method: AllocationMethod,
    pub global_t: f64,
    pub layers: Vec<LayerBudget>,
}

impl LayerAllocation {
    pub fn uniform(layers: &[(String, u64)], t: f64) -> Result<Self> {
        check_target(t)?;
        Ok(LayerAllocation {
            method: AllocationMethod::Uniform,
            global_t: t,
            layers: layers
                .iter()
                .map(|(name, params)| LayerBudget {
                    name: name.clone(),
                    t,
                    params: *params,
                })
                .collect(),
        })
    }

    pub fn per_layer_t(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.t).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.t)
    }

    /// Parameter-weighted mean of the per-layer targets.
    pub fn weighted_mean(&self) -> f64 {
        let total: f64 = self.layers.iter().map(|l| l.params as f64).sum();
        self.layers.iter().map(|l| l.t * l.params as f64).sum::<f64>() / total
    }

    /// Checks ranges and the weighted-mean budget.
    pub fn validate(&self) -> Result<()> {
        check_target(self.global_t)?;
        if self.layers.is_empty() {
            return Err(TrimError::contract("allocation has no layers"));
        }
        for l in &self.layers {
            if !(0.0..1.0).contains(&l.t) {
                return Err(TrimError::contract(format!("layer {} target {} outside [0, 1)", l.name, l.t)));
            }
            if l.params == 0 {
                return Err(TrimError::contract(format!("layer {} has zero parameters", l.name)));
            }
        }
        let mean = self.weighted_mean();
        if (mean - self.global_t).abs() > 1e-6 * self.global_t.max(1e-3) {
            return Err(TrimError::Budget(format!(
                "weighted mean {mean} does not match global target {}",
                self.global_t
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("allocation serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let a: LayerAllocation =
            serde_json::from_str(s).map_err(|e| TrimError::format(format!("allocation file: {e}")))?;
        a.validate()?;
        Ok(a)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }
}

fn check_target(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(TrimError::contract(format!("global target {t} outside [0, 1)")));
    }
    Ok(())
}

/// Outlier multiple `M` and deviation bound `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OwlParams {
    pub m: f64,
    pub lambda: f64,
}

impl Default for OwlParams {
    fn default() -> Self {
        OwlParams {
            m: DEFAULT_OWL_M,
            lambda: DEFAULT_OWL_LAMBDA,
        }
    }
}

impl OwlParams {
    /// Requires `M > 1` and `λ ∈ [0, min(T, cutoff − T))` (λ = 0 is always
    /// accepted).
    pub fn validate(&self, t: f64, cutoff: f64) -> Result<()> {
        if !(self.m > 1.0 && self.m.is_finite()) {
            return Err(TrimError::contract(format!("outlier multiple M must exceed 1, got {}", self.m)));
        }
        let bound = t.min(cutoff - t);
        if !(self.lambda >= 0.0 && (self.lambda == 0.0 || self.lambda < bound)) {
            return Err(TrimError::contract(format!(
                "lambda {} outside [0, {bound}) for T = {t}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn outlier_threshold<T: Scalar>(a: &ScoreMatrix<T>, m: f64) -> f64 {
    let s = a.scores();
    let mean = s.as_slice().iter().map(|v| v.widen()).sum::<f64>() / s.len().max(1) as f64;
    m * mean
}

/// Fraction of entries with `A_ij > M · mean(A)`.
pub fn outlier_ratio<T: Scalar>(a: &ScoreMatrix<T>, m: f64) -> f64 {
    let s = a.scores();
    if s.is_empty() {
        return 0.0;
    }
    let thr = outlier_threshold(a, m);
    let count = s.as_slice().iter().filter(|v| v.widen() > thr).count();
    count as f64 / s.len() as f64
}

/// Per-row number of outlier positions, against the layer-wide mean.
pub fn per_dimension_outlier_counts<T: Scalar>(a: &ScoreMatrix<T>, m: f64) -> Vec<usize> {
    let thr = outlier_threshold(a, m);
    a.scores()
        .rows_iter()
        .map(|r| r.iter().filter(|v| v.widen() > thr).count())
        .collect()
}

/// Outlier-weighted layer allocation.
///
/// `t_l = T + λ · (r̄ − r_l) / max(max_l |r_l − r̄|, ε)` with `r̄` the
/// parameter-weighted mean ratio, followed by a projection onto
/// `[T − λ, T + λ]` with weighted mean `T`.
pub fn owl_allocate(
    names: &[String],
    ratios: &[f64],
    sizes: &[u64],
    t: f64,
    p: OwlParams,
    cutoff: f64,
) -> Result<LayerAllocation> {
    if ratios.is_empty() || ratios.len() != sizes.len() || names.len() != sizes.len() {
        return Err(TrimError::shape("owl_allocate needs one name, ratio and size per layer"));
    }
    check_target(t)?;
    p.validate(t, cutoff)?;
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let total_w: f64 = weights.iter().sum();
    if !(total_w > 0.0) {
        return Err(TrimError::contract("layer sizes sum to zero"));
    }
    let mean_r = ratios.iter().zip(&weights).map(|(r, w)| r * w).sum::<f64>() / total_w;
    let spread = ratios
        .iter()
        .map(|r| (r - mean_r).abs())
        .fold(0.0f64, f64::max)
        .max(RATIO_EPS);
    let raw: Vec<f64> = ratios.iter().map(|r| t + p.lambda * (mean_r - r) / spread).collect();
    let ts = project_weighted_mean(&raw, &weights, t, t - p.lambda, t + p.lambda)?;
    Ok(LayerAllocation {
        method: AllocationMethod::Owl,
        global_t: t,
        layers: names
            .iter()
            .zip(ts)
            .zip(sizes)
            .map(|((name, t), &params)| LayerBudget {
                name: name.clone(),
                t,
                params,
            })
            .collect(),
    })
}

/// Convenience: outlier ratios from per-layer scores, then [`owl_allocate`].
pub fn owl_from_scores<T: Scalar>(
    layers: &[(String, &ScoreMatrix<T>)],
    t: f64,
    p: OwlParams,
) -> Result<LayerAllocation> {
    let names: Vec<String> = layers.iter().map(|(n, _)| n.clone()).collect();
    let ratios: Vec<f64> = layers.iter().map(|(_, a)| outlier_ratio(a, p.m)).collect();
    let sizes: Vec<u64> = layers.iter().map(|(_, a)| a.scores().len() as u64).collect();
    owl_allocate(&names, &ratios, &sizes, t, p, DEFAULT_CUTOFF)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreMetric;
    use crate::tensor::{DetRng, Matrix};

    fn sm(rows: &[&[f32]]) -> ScoreMatrix<f32> {
        ScoreMatrix::new(Matrix::from_rows(rows), ScoreMetric::Wanda).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("layer{i}")).collect()
    }

    #[test]
    fn outlier_ratio_hand_case() {
        let a = sm(&[&[10.0, 1.0, 1.0], &[1.0, 1.0, 1.0]]);
        assert!((outlier_ratio(&a, 3.0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(per_dimension_outlier_counts(&a, 3.0), vec![1, 0]);
    }

    #[test]
    fn constant_matrix_has_no_outliers() {
        let a = sm(&[&[2.0, 2.0], &[2.0, 2.0]]);
        assert_eq!(outlier_ratio(&a, 1.5), 0.0);
        assert_eq!(per_dimension_outlier_counts(&a, 1.5), vec![0, 0]);
    }

    #[test]
    fn outlier_counts_match_counting_oracle() {
        let mut rng = DetRng::new(17);
        let m: Matrix<f32> = rng.gaussian_matrix::<f32>(7, 9, 1.0).map(|v| v.abs().powi(3)).unwrap();
        let a = ScoreMatrix::new(m.clone(), ScoreMetric::Wanda).unwrap();
        let mean: f64 = m.as_slice().iter().map(|&v| v as f64).sum::<f64>() / 63.0;
        let mut rows = vec![0usize; 7];
        let mut total = 0;
        for i in 0..7 {
            for j in 0..9 {
                if m.get(i, j) as f64 > 2.0 * mean {
                    rows[i] += 1;
                    total += 1;
                }
            }
        }
        assert_eq!(per_dimension_outlier_counts(&a, 2.0), rows);
        assert!((outlier_ratio(&a, 2.0) - total as f64 / 63.0).abs() < 1e-15);
        let scaled = ScoreMatrix::new(m.map(|v| v * 7.5).unwrap(), ScoreMetric::Wanda).unwrap();
        assert_eq!(outlier_ratio(&scaled, 2.0), outlier_ratio(&a, 2.0));
    }

    #[test]
    fn owl_zero_lambda_is_uniform() {
        let p = OwlParams { m: 5.0, lambda: 0.0 };
        let a = owl_allocate(&names(3), &[0.1, 0.0, 0.3], &[10, 20, 30], 0.7, p, 0.95).unwrap();
        assert!(a.layers.iter().all(|l| l.t == 0.7));
    }

    #[test]
    fn owl_symmetric_two_layers() {
        let p = OwlParams { m: 5.0, lambda: 0.1 };
        let a = owl_allocate(&names(2), &[0.0, 0.02], &[100, 100], 0.7, p, 0.95).unwrap();
        assert!((a.layers[0].t - 0.8).abs() < 1e-12);
        assert!((a.layers[1].t - 0.6).abs() < 1e-12);
    }

    #[test]
    fn owl_weighted_mean_and_bounds() {
        let p = OwlParams { m: 5.0, lambda: 0.12 };
        let ratios = [0.01, 0.05, 0.002];
        let sizes = [1000u64, 250, 4000];
        let a = owl_allocate(&names(3), &ratios, &sizes, 0.7, p, 0.95).unwrap();
        let weighted: f64 = a.layers.iter().map(|l| l.t * l.params as f64).sum();
        assert!((weighted / 5250.0 - 0.7).abs() < 1e-9);
        assert!(a.layers.iter().all(|l| l.t >= 0.58 - 1e-12 && l.t <= 0.82 + 1e-12));
        // anti-monotone in the ratio
        assert!(a.layers[1].t <= a.layers[0].t && a.layers[0].t <= a.layers[2].t);
        a.validate().unwrap();
    }

    #[test]
    fn owl_rejects_bad_params() {
        let p = OwlParams { m: 0.5, lambda: 0.1 };
        assert!(owl_allocate(&names(1), &[0.0], &[1], 0.7, p, 0.95).is_err());
        let p = OwlParams { m: 5.0, lambda: 0.3 };
        assert!(owl_allocate(&names(1), &[0.0], &[1], 0.7, p, 0.95).is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let a = LayerAllocation::uniform(&[("layer0".into(), 12), ("layer1".into(), 8)], 0.7).unwrap();
        let back = LayerAllocation::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        let bad = r#"{"method":"uniform","global_t":0.7,"layers":[],"extra":1}"#;
        assert!(LayerAllocation::from_json(bad).is_err());
        let external = r#"{"method":"external","global_t":0.5,
            "layers":[{"name":"a","t":0.4,"params":10},{"name":"b","t":0.6,"params":10}]}"#;
        assert_eq!(LayerAllocation::from_json(external).unwrap().per_layer_t(), vec![0.4, 0.6]);
        let unbalanced = r#"{"method":"external","global_t":0.5,
            "layers":[{"name":"a","t":0.4,"params":10},{"name":"b","t":0.4,"params":10}]}"#;
        assert!(matches!(LayerAllocation::from_json(unbalanced), Err(TrimError::Budget(_))));
    }
}
