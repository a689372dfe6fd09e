//! Layer-by-layer pruning of a [`ToyModel`] and holdout evaluation.

use serde::{Deserialize, Serialize};

use super::calib::{CalibrationSet, CalibrationSource};
use super::grad::{capture_gradients, GradientLoss};
use super::model::ToyModel;
use crate::allocation::LayerAllocation;
use crate::error::{Result, TrimError};
use crate::masking::{
    apply_mask, apportion, build_mask, mask_from_row_counts, row_cap, ComparisonGroup, PruneMask, SparsityVector,
};
use crate::optimizer::{lr_search, uniform_baseline, LrTrial, TrimConfig, TrimResult};
use crate::quality::{cosine, qmetric, qmetric_dimwise, DimQualityVector, LayerMetric, LayerQuality};
use crate::scalar::Scalar;
use crate::scoring::{score, GradientMatrix, ScoreInputs, ScoreMatrix, ScoreMetric, DEFAULT_GBLM_BLEND, DEFAULT_HESSIAN_DAMPING};
use crate::tensor::Matrix;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// How a model gets pruned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub score_metric: ScoreMetric,
    pub hessian_damping: f64,
    pub gblm_blend: f64,
    /// Loss differentiated for gblm scores.
    pub gradient_loss: GradientLoss,
    pub trim: TrimConfig,
    pub trim_enabled: bool,
    /// Feed TRIM's evaluations with inputs from the already-pruned prefix.
    pub recalc: bool,
    /// Comparison group for runs with TRIM disabled. TRIM always ranks
    /// within rows.
    pub group: ComparisonGroup,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            score_metric: ScoreMetric::Wanda,
            hessian_damping: DEFAULT_HESSIAN_DAMPING,
            gblm_blend: DEFAULT_GBLM_BLEND,
            gradient_loss: GradientLoss::default(),
            trim: TrimConfig::default(),
            trim_enabled: true,
            recalc: false,
            group: ComparisonGroup::PerOutput,
        }
    }
}

/// Everything recorded for one pruned layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord<T: Scalar> {
    pub name: String,
    /// Layer target after integerizing the allocation.
    pub t: f64,
    pub scores: ScoreMatrix<T>,
    pub mask: PruneMask,
    pub result: TrimResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneRun<T: Scalar> {
    pub dense: ToyModel<T>,
    pub pruned: ToyModel<T>,
    pub allocation: LayerAllocation,
    pub config: PruneConfig,
    pub calibration: CalibrationSource,
    pub layers: Vec<LayerRecord<T>>,
}

impl<T: Scalar> PruneRun<T> {
    pub fn pruned_count(&self) -> usize {
        self.layers.iter().map(|l| l.mask.pruned_count()).sum()
    }

    pub fn pruned_fraction(&self) -> f64 {
        self.pruned_count() as f64 / self.dense.total_params() as f64
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            score_metric: self.config.score_metric,
            trim_enabled: self.config.trim_enabled,
            recalc: self.config.recalc,
            allocation_method: self.allocation.method.as_str().to_string(),
            global_t: self.allocation.global_t,
            pruned_fraction: self.pruned_fraction(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerReport {
                    layer: l.name.clone(),
                    t: l.t,
                    chosen_lr: l.result.chosen_lr,
                    q_uniform: l.result.q_uniform.value,
                    q_best: l.result.q_best.value,
                    layer_metric: l.result.q_best.metric,
                    per_iter_quality: l.result.per_iter_quality.clone(),
                    lr_trials: l.result.lr_trials.clone(),
                    pruned: l.mask.pruned_count(),
                    params: l.mask.shape().0 * l.mask.shape().1,
                    s_vector_ref: format!("{}.svec", l.name),
                })
                .collect(),
        }
    }
}

/// Per-layer entry of a [`RunReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    #[serde(rename = "T")]
    pub t: f64,
    pub chosen_lr: f64,
    pub q_uniform: f64,
    pub q_best: f64,
    pub layer_metric: LayerMetric,
    pub per_iter_quality: Vec<f64>,
    pub lr_trials: Vec<LrTrial>,
    pub pruned: usize,
    pub params: usize,
    /// Name of the sparsity-vector tensor in the run container.
    pub s_vector_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub score_metric: ScoreMetric,
    pub trim_enabled: bool,
    pub recalc: bool,
    pub allocation_method: String,
    pub global_t: f64,
    pub pruned_fraction: f64,
    pub layers: Vec<LayerReport>,
}

/// Input of every layer on the dense model.
pub fn capture_activations<T: Scalar>(model: &ToyModel<T>, calib: &CalibrationSet<T>) -> Result<Vec<Matrix<T>>> {
    model.layer_inputs(&calib.samples)
}

/// Scores of every layer, always from dense-model activations.
pub fn score_layers<T: Scalar>(
    model: &ToyModel<T>,
    calib: &CalibrationSet<T>,
    metric: ScoreMetric,
    hessian_damping: f64,
    gblm_blend: f64,
    loss: GradientLoss,
) -> Result<Vec<ScoreMatrix<T>>> {
    let acts = capture_activations(model, calib)?;
    let grads = if metric.needs_gradients() {
        let targets = calib
            .targets
            .as_ref()
            .ok_or_else(|| TrimError::contract("gblm scoring needs calibration targets"))?;
        Some(
            capture_gradients(model, &calib.samples, targets, loss)?
                .into_iter()
                .map(|g| GradientMatrix::new(g, gblm_blend))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            score(
                metric,
                &l.weight,
                ScoreInputs {
                    activations: Some(&acts[i]),
                    gradients: grads.as_ref().map(|g| &g[i]),
                    hessian_damping,
                },
            )
        })
        .collect()
}

/// Integer per-layer prune counts summing to `round(Σ t_l·P_l)`.
fn layer_counts<T: Scalar>(model: &ToyModel<T>, allocation: &LayerAllocation, cutoff: f64) -> Result<Vec<usize>> {
    let mut quotas = Vec::with_capacity(model.len());
    let mut caps = Vec::with_capacity(model.len());
    for l in model.layers() {
        let t = allocation
            .get(&l.name)
            .ok_or_else(|| TrimError::contract(format!("allocation has no entry for {}", l.name)))?;
        let (d, n) = l.weight.shape();
        quotas.push(t * (d * n) as f64);
        caps.push(d * row_cap(cutoff, n));
    }
    let total = quotas.iter().sum::<f64>().round_ties_even() as usize;
    apportion(&quotas, total, &caps)
}

fn group_baseline<T: Scalar>(
    w: &Matrix<T>,
    x: &Matrix<T>,
    a: &ScoreMatrix<T>,
    t: f64,
    group: ComparisonGroup,
    cfg: &TrimConfig,
) -> Result<TrimResult> {
    let s = SparsityVector::uniform(w.rows(), t, cfg.cutoff)?;
    let mask = build_mask(a, &s, group)?;
    let y = w.matmul(x)?;
    let yhat = apply_mask(w, &mask)?.matmul(x)?;
    let q = qmetric(&y, &yhat, cfg.layer_metric)?;
    let c = qmetric_dimwise(&y, &yhat, cfg.dim_metric)?;
    Ok(TrimResult {
        s_best: s,
        row_counts: mask.row_counts(),
        q_best: q,
        q_uniform: q,
        chosen_lr: 0.0,
        per_iter_quality: vec![q.value],
        dim_quality_final: DimQualityVector {
            values: c.values,
            metric: cfg.dim_metric,
        },
        lr_trials: Vec::new(),
    })
}

/// Prunes every layer in order.
///
/// Scores always come from the dense model's activations. With `recalc`
/// on, the inputs used for layer `ℓ`'s quality evaluation are recomputed
/// through the already-pruned layers `< ℓ`; otherwise dense activations are
/// used throughout.
pub fn prune_model<T: Scalar>(
    model: &ToyModel<T>,
    calib: &CalibrationSet<T>,
    allocation: &LayerAllocation,
    cfg: &PruneConfig,
) -> Result<PruneRun<T>> {
    cfg.trim.validate()?;
    let dense_inputs = capture_activations(model, calib)?;
    let scores = score_layers(model, calib, cfg.score_metric, cfg.hessian_damping, cfg.gblm_blend, cfg.gradient_loss)?;
    let counts = layer_counts(model, allocation, cfg.trim.cutoff)?;

    let mut pruned = model.clone();
    let mut h = calib.samples.clone();
    let mut records = Vec::with_capacity(model.len());
    for (i, a) in scores.into_iter().enumerate() {
        let layer = model.layer(i);
        let w = &layer.weight;
        let t = counts[i] as f64 / w.len() as f64;
        let x_eval = if cfg.recalc { &h } else { &dense_inputs[i] };
        let result = if cfg.trim_enabled {
            lr_search(w, x_eval, &a, t, &cfg.trim)?
        } else if cfg.group == ComparisonGroup::PerOutput {
            uniform_baseline(w, x_eval, &a, t, &cfg.trim)?
        } else {
            group_baseline(w, x_eval, &a, t, cfg.group, &cfg.trim)?
        };
        let mask = if cfg.trim_enabled || cfg.group == ComparisonGroup::PerOutput {
            mask_from_row_counts(a.scores(), &result.row_counts)?
        } else {
            build_mask(&a, &result.s_best, cfg.group)?
        };
        pruned.set_weight(i, apply_mask(w, &mask)?)?;
        if cfg.recalc {
            h = pruned.layer_forward(i, &h)?;
        }
        records.push(LayerRecord {
            name: layer.name.clone(),
            t,
            scores: a,
            mask,
            result,
        });
    }

    Ok(PruneRun {
        dense: model.clone(),
        pruned,
        allocation: allocation.clone(),
        config: cfg.clone(),
        calibration: calib.source.clone(),
        layers: records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEvalRecord {
    pub layer: String,
    pub sparsity: f64,
    /// Flattened cosine of the layer's pre-activation output, pruned vs
    /// dense, on dense holdout inputs.
    pub cosim_flat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEvalRecord {
    pub sparsity: f64,
    pub end_to_end_cosine: f64,
    pub loss_dense: f64,
    pub loss_pruned: f64,
    pub loss_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub holdout_samples: usize,
    pub layers: Vec<LayerEvalRecord>,
    pub global: GlobalEvalRecord,
}

fn mean_sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Compares a pruned model with its dense original on holdout data.
///
/// The toy loss is the mean squared error against the holdout targets, or
/// against the dense outputs when the holdout set has none.
pub fn evaluate_models<T: Scalar>(
    dense: &ToyModel<T>,
    pruned: &ToyModel<T>,
    holdout: &CalibrationSet<T>,
) -> Result<EvalReport> {
    if dense.len() != pruned.len() {
        return Err(TrimError::shape("dense and pruned models differ in depth"));
    }
    let inputs = dense.layer_inputs(&holdout.samples)?;
    let mut layers = Vec::with_capacity(dense.len());
    let mut zeros = 0usize;
    for (i, (d, p)) in dense.layers().iter().zip(pruned.layers()).enumerate() {
        if d.weight.shape() != p.weight.shape() {
            return Err(TrimError::shape(format!("layer {} shapes differ", d.name)));
        }
        let y = d.weight.matmul(&inputs[i])?;
        let yhat = p.weight.matmul(&inputs[i])?;
        // weights removed by pruning: nonzero in the dense layer, zero after
        let z = d
            .weight
            .as_slice()
            .iter()
            .zip(p.weight.as_slice())
            .filter(|(dv, pv)| **dv != T::zero() && **pv == T::zero())
            .count();
        zeros += z;
        layers.push(LayerEvalRecord {
            layer: d.name.clone(),
            sparsity: z as f64 / d.weight.len() as f64,
            cosim_flat: qmetric(&y, &yhat, LayerMetric::CosimFlat)?.value,
        });
    }
    let out_dense = dense.forward(&holdout.samples)?.to_f64_vec();
    let out_pruned = pruned.forward(&holdout.samples)?.to_f64_vec();
    let (loss_dense, loss_pruned) = match &holdout.targets {
        Some(t) => {
            let t = t.to_f64_vec();
            (mean_sq_err(&out_dense, &t), mean_sq_err(&out_pruned, &t))
        }
        None => (0.0, mean_sq_err(&out_pruned, &out_dense)),
    };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        holdout_samples: holdout.len(),
        layers,
        global: GlobalEvalRecord {
            sparsity: zeros as f64 / dense.total_params() as f64,
            end_to_end_cosine: cosine(out_dense.iter().copied(), out_pruned.iter().copied()),
            loss_dense,
            loss_pruned,
            loss_delta: loss_pruned - loss_dense,
        },
    })
}

/// [`evaluate_models`] on a run, refusing a holdout drawn from the
/// calibration seed.
pub fn evaluate_run<T: Scalar>(run: &PruneRun<T>, holdout: &CalibrationSet<T>) -> Result<EvalReport> {
    if let (CalibrationSource::SyntheticGaussian { seed: a }, CalibrationSource::SyntheticGaussian { seed: b }) =
        (&run.calibration, &holdout.source)
    {
        if a == b {
            return Err(TrimError::contract("holdout seed must differ from the calibration seed"));
        }
    }
    evaluate_models(&run.dense, &run.pruned, holdout)
}

/// Layer quality shortcut used by reports: `qmetric` on dense vs pruned
/// outputs of one layer.
pub fn layer_quality<T: Scalar>(w: &Matrix<T>, pruned: &Matrix<T>, x: &Matrix<T>, metric: LayerMetric) -> Result<LayerQuality> {
    qmetric(&w.matmul(x)?, &pruned.matmul(x)?, metric)
}
