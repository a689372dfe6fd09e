//! Iterative dimension-wise sparsity adjustment and its learning-rate
//! search.
//!
//! For one layer with weights `W` (`D × N`), calibration inputs `X`
//! (`N × L`) and scores `A`, the adjustment loop starts from a uniform
//! sparsity vector at the layer budget `T` and repeats `k_iters` times:
//!
//! 1. prune every row `i` at `S_i` (lowest scores first) and compute
//!    `Ŷ = W_pruned · X`;
//! 2. score the layer with the layer metric, keeping the best vector seen
//!    (strict improvement only, so iteration 0, the uniform vector, is
//!    always a candidate);
//! 3. score every row with the dimension metric, min-max normalize the
//!    row scores, scale by the learning rate and recenter to mean `T`;
//! 4. clamp into `[0, cutoff]` and restore the mean (see
//!    [`crate::budget::project_mean`]).
//!
//! The new vector is rebuilt from `T` each iteration rather than
//! accumulated. A positive rate prunes rows that hold up well harder; a
//! negative rate does the opposite.

use serde::{Deserialize, Serialize};

use crate::budget::project_mean;
use crate::error::{Result, TrimError};
use crate::masking::{apply_mask, mask_from_row_counts, round_counts, SparsityVector, DEFAULT_CUTOFF};
use crate::quality::{qmetric, qmetric_dimwise, DimMetric, DimQualityVector, LayerMetric, LayerQuality};
use crate::scalar::Scalar;
use crate::scoring::ScoreMatrix;
use crate::tensor::Matrix;

pub const DEFAULT_K_ITERS: usize = 10;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_LR_SCHEDULE: [f64; 6] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5];

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrimConfig {
    pub k_iters: usize,
    pub lr_schedule: Vec<f64>,
    pub epsilon: f64,
    pub cutoff: f64,
    pub layer_metric: LayerMetric,
    pub dim_metric: DimMetric,
}

impl Default for TrimConfig {
    fn default() -> Self {
        TrimConfig {
            k_iters: DEFAULT_K_ITERS,
            lr_schedule: DEFAULT_LR_SCHEDULE.to_vec(),
            epsilon: DEFAULT_EPSILON,
            cutoff: DEFAULT_CUTOFF,
            layer_metric: LayerMetric::default(),
            dim_metric: DimMetric::default(),
        }
    }
}

impl TrimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_iters == 0 {
            return Err(TrimError::contract("k_iters must be >= 1"));
        }
        if self.lr_schedule.is_empty() {
            return Err(TrimError::contract("learning-rate schedule is empty"));
        }
        if self.lr_schedule.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(TrimError::contract("learning rates must be positive and finite"));
        }
        if self.lr_schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TrimError::contract("learning-rate schedule must be strictly increasing"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(TrimError::contract("epsilon must be positive"));
        }
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err(TrimError::contract(format!("cutoff must lie in (0, 1), got {}", self.cutoff)));
        }
        Ok(())
    }
}

/// One learning rate tried by [`lr_search`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrTrial {
    pub lr: f64,
    pub q_best: f64,
}

/// Outcome of the adjustment loop for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimResult {
    pub s_best: SparsityVector,
    /// Integer prune counts per row for `s_best`.
    pub row_counts: Vec<usize>,
    pub q_best: LayerQuality,
    pub q_uniform: LayerQuality,
    pub chosen_lr: f64,
    pub per_iter_quality: Vec<f64>,
    pub dim_quality_final: DimQualityVector,
    /// Learning rates evaluated, in order. Empty for a single adjustment run.
    pub lr_trials: Vec<LrTrial>,
}

/// Min-max normalization `c'_i = (c_i − min c) / (max c − min c + ε)`.
pub fn normalize_minmax(c: &[f64], epsilon: f64) -> Vec<f64> {
    let Some(&first) = c.first() else {
        return Vec::new();
    };
    let (lo, hi) = c.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let denom = hi - lo + epsilon;
    c.iter().map(|&v| (v - lo) / denom).collect()
}

/// Recentering around the target: `S_i = δ_i − mean(δ) + T`.
pub fn recenter(delta: &[f64], t: f64) -> Vec<f64> {
    if delta.is_empty() {
        return Vec::new();
    }
    let mean = delta.iter().sum::<f64>() / delta.len() as f64;
    delta.iter().map(|&d| d - mean + t).collect()
}

/// Normalize, scale by `alpha` and recenter: the unclamped next sparsity vector.
pub fn update_step(c: &[f64], alpha: f64, t: f64, epsilon: f64) -> Vec<f64> {
    let delta: Vec<f64> = normalize_minmax(c, epsilon).into_iter().map(|v| alpha * v).collect();
    recenter(&delta, t)
}

fn check_inputs<T: Scalar>(w: &Matrix<T>, x: &Matrix<T>, a: &ScoreMatrix<T>, t: f64, cfg: &TrimConfig) -> Result<()> {
    cfg.validate()?;
    if a.shape() != w.shape() {
        return Err(TrimError::shape(format!("scores {:?} vs weights {:?}", a.shape(), w.shape())));
    }
    if x.rows() != w.cols() {
        return Err(TrimError::shape(format!(
            "weights have {} inputs, activations {} rows",
            w.cols(),
            x.rows()
        )));
    }
    if w.rows() == 0 {
        return Err(TrimError::shape("layer has no output dimensions"));
    }
    if !(t >= 0.0 && t < cfg.cutoff) {
        return Err(TrimError::contract(format!("target {t} outside [0, {})", cfg.cutoff)));
    }
    Ok(())
}

/// Dense reference output and per-row evaluation of a sparsity vector.
struct LayerEval<'a, T: Scalar> {
    w: &'a Matrix<T>,
    x: &'a Matrix<T>,
    a: &'a ScoreMatrix<T>,
    y: Matrix<T>,
    cfg: &'a TrimConfig,
}

struct Evaluated {
    counts: Vec<usize>,
    q: f64,
    c: Vec<f64>,
}

impl<'a, T: Scalar> LayerEval<'a, T> {
    fn new(w: &'a Matrix<T>, x: &'a Matrix<T>, a: &'a ScoreMatrix<T>, cfg: &'a TrimConfig) -> Result<Self> {
        let y = w.matmul(x)?;
        Ok(LayerEval { w, x, a, y, cfg })
    }

    fn eval(&self, s: &SparsityVector) -> Result<Evaluated> {
        let counts = round_counts(s, self.w.cols())?;
        let mask = mask_from_row_counts(self.a.scores(), &counts)?;
        let yhat = apply_mask(self.w, &mask)?.matmul(self.x)?;
        let q = qmetric(&self.y, &yhat, self.cfg.layer_metric)?.value;
        let c = qmetric_dimwise(&self.y, &yhat, self.cfg.dim_metric)?.values;
        Ok(Evaluated { counts, q, c })
    }
}

/// Runs the adjustment loop for a single learning rate.
pub fn trim_adjust<T: Scalar>(
    w: &Matrix<T>,
    x: &Matrix<T>,
    a: &ScoreMatrix<T>,
    t: f64,
    alpha: f64,
    cfg: &TrimConfig,
) -> Result<TrimResult> {
    check_inputs(w, x, a, t, cfg)?;
    if !alpha.is_finite() {
        return Err(TrimError::contract("learning rate must be finite"));
    }
    let layer = LayerEval::new(w, x, a, cfg)?;
    run_adjust(&layer, t, alpha)
}

fn run_adjust<T: Scalar>(layer: &LayerEval<'_, T>, t: f64, alpha: f64) -> Result<TrimResult> {
    let cfg = layer.cfg;
    let d = layer.w.rows();
    let mut s = SparsityVector::uniform(d, t, cfg.cutoff)?;
    let mut best: Option<(f64, SparsityVector, Evaluated)> = None;
    let mut per_iter = Vec::with_capacity(cfg.k_iters);

    for _ in 0..cfg.k_iters {
        let ev = layer.eval(&s)?;
        if !ev.q.is_finite() {
            return Err(TrimError::Numerical("layer quality is not finite".into()));
        }
        per_iter.push(ev.q);
        let next = project_mean(&update_step(&ev.c, alpha, t, cfg.epsilon), t, 0.0, cfg.cutoff)?;
        if best.as_ref().is_none_or(|(q, _, _)| ev.q > *q) {
            best = Some((ev.q, s, ev));
        }
        s = SparsityVector::new(next, t, cfg.cutoff)?;
    }

    let (q_best, s_best, ev) = best.expect("k_iters >= 1");
    Ok(TrimResult {
        s_best,
        row_counts: ev.counts,
        q_best: LayerQuality {
            value: q_best,
            metric: cfg.layer_metric,
        },
        q_uniform: LayerQuality {
            value: per_iter[0],
            metric: cfg.layer_metric,
        },
        chosen_lr: alpha,
        per_iter_quality: per_iter,
        dim_quality_final: DimQualityVector {
            values: ev.c,
            metric: cfg.dim_metric,
        },
        lr_trials: Vec::new(),
    })
}

/// Uniform allocation at `t`, evaluated the same way as the optimizer's
/// iteration 0.
pub fn uniform_baseline<T: Scalar>(
    w: &Matrix<T>,
    x: &Matrix<T>,
    a: &ScoreMatrix<T>,
    t: f64,
    cfg: &TrimConfig,
) -> Result<TrimResult> {
    let one = TrimConfig {
        k_iters: 1,
        ..cfg.clone()
    };
    let mut r = trim_adjust(w, x, a, t, 0.0, &one)?;
    r.chosen_lr = 0.0;
    Ok(r)
}

/// Walks `lr_schedule` upward, keeping the best result and stopping once a
/// larger rate does worse than the best so far. A rate that exactly ties the
/// best (typically because it changes no integer row count) does not stop
/// the walk. If no positive rate
/// beats the uniform allocation, the walk is repeated with negated rates;
/// if that fails too, the uniform allocation is returned with
/// `chosen_lr = 0`.
pub fn lr_search<T: Scalar>(
    w: &Matrix<T>,
    x: &Matrix<T>,
    a: &ScoreMatrix<T>,
    t: f64,
    cfg: &TrimConfig,
) -> Result<TrimResult> {
    check_inputs(w, x, a, t, cfg)?;
    let layer = LayerEval::new(w, x, a, cfg)?;
    let mut trials = Vec::new();
    let mut fallback: Option<TrimResult> = None;

    for sign in [1.0, -1.0] {
        let mut walk_best: Option<TrimResult> = None;
        for &lr in &cfg.lr_schedule {
            let r = run_adjust(&layer, t, sign * lr)?;
            trials.push(LrTrial {
                lr: r.chosen_lr,
                q_best: r.q_best.value,
            });
            if fallback.is_none() {
                fallback = Some(r.clone());
            }
            let prev = walk_best.as_ref().map(|b| b.q_best.value);
            match prev {
                Some(q) if r.q_best.value < q => break,
                // a tie means the rate was too small to move any integer
                // count; keep the smaller rate and keep walking
                Some(q) if r.q_best.value == q => {}
                _ => walk_best = Some(r),
            }
        }
        if let Some(mut b) = walk_best {
            if b.q_best.value > b.q_uniform.value {
                b.lr_trials = trials;
                return Ok(b);
            }
        }
    }

    // no rate beat uniform, so every run's best vector is still the uniform one
    let mut r = fallback.expect("schedule is nonempty");
    debug_assert!(r.s_best.is_uniform());
    r.chosen_lr = 0.0;
    r.lr_trials = trials;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::score_wanda;
    use crate::tensor::DetRng;

    #[test]
    fn normalize_hand_vectors() {
        let c = normalize_minmax(&[0.2, 0.5, 0.8], 1e-8);
        assert!((c[0] - 0.0).abs() < 1e-9);
        assert!((c[1] - 0.5).abs() < 1e-7);
        assert!((c[2] - 1.0).abs() < 1e-7);
        assert!(c.iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_eq!(normalize_minmax(&[0.3, 0.3, 0.3], 1e-8), vec![0.0; 3]);
        assert_eq!(normalize_minmax(&[0.7], 1e-8), vec![0.0]);
    }

    #[test]
    fn recenter_hand_vectors() {
        let s = recenter(&[0.1, 0.3], 0.7);
        assert!((s[0] - 0.6).abs() < 1e-12 && (s[1] - 0.8).abs() < 1e-12);
        assert!(recenter(&[0.4; 3], 0.5).iter().all(|v| (v - 0.5).abs() < 1e-15));
        let mut rng = DetRng::new(1);
        let delta = rng.gaussian_vec(37, 0.3);
        let s = recenter(&delta, 0.6);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 0.6).abs() < 1e-12);
        for i in 1..s.len() {
            assert!(((s[i] - s[0]) - (delta[i] - delta[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn update_step_is_monotone_in_quality() {
        let c = [0.9, 0.4, 0.7, 0.95];
        let s = update_step(&c, 0.1, 0.5, 1e-8);
        for i in 0..4 {
            for j in 0..4 {
                if c[i] > c[j] {
                    assert!(s[i] > s[j]);
                }
            }
        }
        let s = update_step(&c, -0.1, 0.5, 1e-8);
        assert!(s[3] < s[1]);
    }

    #[test]
    fn config_validation() {
        assert!(TrimConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrimConfig)| {
            let mut c = TrimConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.k_iters = 0));
        assert!(bad(|c| c.lr_schedule = vec![0.1, 0.05]));
        assert!(bad(|c| c.lr_schedule = vec![-0.1]));
        assert!(bad(|c| c.cutoff = 1.0));
        let err = serde_json::from_str::<TrimConfig>(r#"{"k_iters": 3, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: TrimConfig = serde_json::from_str(r#"{"k_iters": 3, "dim_metric": "psnr"}"#).unwrap();
        assert_eq!(ok.k_iters, 3);
        assert_eq!(ok.dim_metric, DimMetric::Psnr);
    }

    fn layer(seed: u64, d: usize, n: usize, l: usize) -> (Matrix<f32>, Matrix<f32>, ScoreMatrix<f32>) {
        let mut rng = DetRng::new(seed);
        let w: Matrix<f32> = rng.gaussian_matrix(d, n, 1.0);
        let x: Matrix<f32> = rng.gaussian_matrix(n, l, 1.0);
        let a = score_wanda(&w, &x).unwrap();
        (w, x, a)
    }

    #[test]
    fn zero_target_prunes_nothing() {
        let (w, x, a) = layer(3, 6, 10, 12);
        let r = trim_adjust(&w, &x, &a, 0.0, 0.2, &TrimConfig::default()).unwrap();
        assert!(r.s_best.values().iter().all(|&v| v == 0.0));
        assert!((r.q_uniform.value - 1.0).abs() < 1e-12);
        assert!(r.row_counts.iter().all(|&k| k == 0));
    }

    #[test]
    fn zero_rate_keeps_uniform() {
        let (w, x, a) = layer(4, 6, 10, 12);
        let r = trim_adjust(&w, &x, &a, 0.6, 0.0, &TrimConfig::default()).unwrap();
        assert!(r.s_best.values().iter().all(|&v| v == 0.6));
        assert_eq!(r.q_best, r.q_uniform);
        assert!(r.per_iter_quality.iter().all(|&q| q == r.q_uniform.value));
    }

    #[test]
    fn result_invariants_hold() {
        let (w, x, a) = layer(5, 12, 24, 20);
        for alpha in [-0.3, -0.05, 0.05, 0.3] {
            let r = trim_adjust(&w, &x, &a, 0.7, alpha, &TrimConfig::default()).unwrap();
            assert!(r.q_best.value >= r.q_uniform.value);
            assert!((r.s_best.mean() - 0.7).abs() < 1e-9);
            assert!(r.s_best.values().iter().all(|&v| (0.0..=0.95).contains(&v)));
            assert_eq!(r.row_counts.iter().sum::<usize>(), (0.7f64 * 12.0 * 24.0).round() as usize);
            assert_eq!(r.per_iter_quality.len(), 10);
        }
    }

    #[test]
    fn schedule_of_one_calls_at_most_twice() {
        let (w, x, a) = layer(6, 8, 16, 16);
        let cfg = TrimConfig {
            lr_schedule: vec![0.05],
            ..TrimConfig::default()
        };
        let r = lr_search(&w, &x, &a, 0.6, &cfg).unwrap();
        assert!(!r.lr_trials.is_empty() && r.lr_trials.len() <= 2);
        assert!(r.q_best.value >= r.q_uniform.value);
    }

    #[test]
    fn plateau_rates_do_not_stop_the_walk() {
        // half the rows hold one dominant weight, half are flat
        let mut rng = DetRng::new(21);
        let (d, n) = (8, 16);
        let w = Matrix::from_fn(d, n, |i, j| {
            let v = if i % 2 == 0 { if j == i { 4.0 } else { 0.01 } } else { 1.0 };
            (v * (1.0 + 0.1 * rng.gaussian())) as f32
        })
        .unwrap();
        let x: Matrix<f32> = rng.gaussian_matrix(n, 32, 1.0);
        let a = score_wanda(&w, &x).unwrap();
        let cfg = TrimConfig {
            lr_schedule: vec![1e-7, 2e-7, 0.5],
            ..TrimConfig::default()
        };
        let r = lr_search(&w, &x, &a, 0.5, &cfg).unwrap();
        assert_eq!(r.lr_trials[0].q_best, r.q_uniform.value);
        assert_eq!(r.lr_trials[1].q_best, r.q_uniform.value);
        assert_eq!(r.chosen_lr, 0.5);
        assert!(r.q_best.value > r.q_uniform.value);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (w, x, a) = layer(7, 4, 6, 5);
        let cfg = TrimConfig::default();
        assert!(trim_adjust(&w, &x, &a, 0.96, 0.1, &cfg).is_err());
        assert!(trim_adjust(&w, &x, &a, -0.1, 0.1, &cfg).is_err());
        assert!(trim_adjust(&w, &w, &a, 0.5, 0.1, &cfg).is_err());
    }
}
