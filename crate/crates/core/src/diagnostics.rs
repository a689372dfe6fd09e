//! Analyses of how importance and pruning sensitivity vary across output
//! dimensions: per-row Gini concentration, per-row degradation curves,
//! single-row removal and outlier-dense row stress tests.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::allocation::per_dimension_outlier_counts;
use crate::error::{Result, TrimError};
use crate::masking::{apply_mask, mask_from_row_counts, row_cap};
use crate::pipeline::ToyModel;
use crate::quality::{qmetric, qmetric_dimwise, DimMetric, LayerMetric};
use crate::scalar::Scalar;
use crate::scoring::{score_wanda, ScoreMatrix};
use crate::tensor::{DetRng, Matrix, Seed};

/// Gini coefficient `Σ_i Σ_j |v_i − v_j| / (2 n² mean(v))`, evaluated as
/// `Σ_k (2k − n − 1) v_(k) / (n² mean(v))` over the ascending order
/// statistics. All-zero and empty inputs give 0.
pub fn gini(v: &[f64]) -> f64 {
    let n = v.len();
    let total: f64 = v.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n_f = n as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| (2.0 * (k as f64 + 1.0) - n_f - 1.0) * x)
        .sum();
    (weighted / (n_f * total)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|b| lo + b as f64 * width).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiniReport {
    pub layer: String,
    pub per_row_gini: Vec<f64>,
    pub histogram: Histogram,
}

/// Gini coefficient of every row of a score matrix, plus a histogram over
/// `[0, 1]`.
pub fn gini_report<T: Scalar>(layer: &str, a: &ScoreMatrix<T>, bins: usize) -> GiniReport {
    let per_row_gini: Vec<f64> = a
        .scores()
        .rows_iter()
        .map(|r| gini(&r.iter().map(|v| v.widen()).collect::<Vec<_>>()))
        .collect();
    let histogram = Histogram::new(&per_row_gini, 0.0, 1.0, bins);
    GiniReport {
        layer: layer.to_string(),
        per_row_gini,
        histogram,
    }
}

/// Per-row cosine similarity across a grid of uniform sparsities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub sparsity_grid: Vec<f64>,
    /// `D` rows, one entry per grid point.
    pub per_dim_quality: Vec<Vec<f64>>,
}

/// Parses `start:stop:step` into an inclusive, increasing grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || TrimError::contract(format!("grid {spec:?} is not start:stop:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    // integer steps avoid accumulated drift
    Ok((0..=n).map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12).collect())
}

/// Prunes every row at the same count, `round(t·N)` capped at
/// `floor(cutoff·N)`, for each grid value `t` and records each row's cosine
/// similarity to the dense output.
pub fn degradation_curve<T: Scalar>(
    w: &Matrix<T>,
    x: &Matrix<T>,
    a: &ScoreMatrix<T>,
    grid: &[f64],
    cutoff: f64,
) -> Result<DegradationCurve> {
    if grid.windows(2).any(|g| g[1] <= g[0]) {
        return Err(TrimError::contract("sparsity grid must be strictly increasing"));
    }
    if grid.iter().any(|&g| !(0.0..=cutoff).contains(&g)) {
        return Err(TrimError::contract(format!("grid values must lie in [0, {cutoff}]")));
    }
    let y = w.matmul(x)?;
    let (d, n) = w.shape();
    let mut per_dim = vec![Vec::with_capacity(grid.len()); d];
    for &t in grid {
        let k = ((t * n as f64).round_ties_even() as usize).min(row_cap(cutoff, n));
        let mask = mask_from_row_counts(a.scores(), &vec![k; d])?;
        let yhat = apply_mask(w, &mask)?.matmul(x)?;
        let c = qmetric_dimwise(&y, &yhat, DimMetric::Cosine)?;
        for (row, v) in per_dim.iter_mut().zip(c.values) {
            row.push(v);
        }
    }
    Ok(DegradationCurve {
        sparsity_grid: grid.to_vec(),
        per_dim_quality: per_dim,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RemovalStrategy {
    MinNorm,
    MaxNorm,
    Random { seed: Seed },
}

impl fmt::Display for RemovalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RemovalStrategy::MinNorm => f.write_str("min_norm"),
            RemovalStrategy::MaxNorm => f.write_str("max_norm"),
            RemovalStrategy::Random { seed } => write!(f, "random:{}", seed.0),
        }
    }
}

impl FromStr for RemovalStrategy {
    type Err = TrimError;

    /// `min_norm`, `max_norm`, `random` (seed 0) or `random:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min_norm" => Ok(RemovalStrategy::MinNorm),
            "max_norm" => Ok(RemovalStrategy::MaxNorm),
            "random" => Ok(RemovalStrategy::Random { seed: Seed(0) }),
            _ => s
                .strip_prefix("random:")
                .and_then(|n| n.parse::<u64>().ok())
                .map(|n| RemovalStrategy::Random { seed: Seed(n) })
                .ok_or_else(|| TrimError::contract(format!("unknown removal strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedRow {
    pub layer: String,
    pub row: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub strategy: RemovalStrategy,
    pub removed: Vec<RemovedRow>,
    pub total_sparsity: f64,
}

/// Zeroes exactly one output row per layer.
pub fn remove_one_dimension<T: Scalar>(
    model: &ToyModel<T>,
    strategy: RemovalStrategy,
) -> Result<(ToyModel<T>, RemovalReport)> {
    let mut rng = match strategy {
        RemovalStrategy::Random { seed } => Some(DetRng::new(seed)),
        _ => None,
    };
    let mut out = model.clone();
    let mut removed = Vec::with_capacity(model.len());
    let mut zeroed = 0usize;
    for (i, layer) in model.layers().iter().enumerate() {
        let d = layer.weight.rows();
        if d < 2 {
            return Err(TrimError::contract(format!("layer {} has fewer than 2 rows", layer.name)));
        }
        let norms = layer.weight.row_norms();
        // ties go to the lower index
        let row = match strategy {
            RemovalStrategy::MinNorm => (0..d).fold(0, |b, r| if norms[r] < norms[b] { r } else { b }),
            RemovalStrategy::MaxNorm => (0..d).fold(0, |b, r| if norms[r] > norms[b] { r } else { b }),
            RemovalStrategy::Random { .. } => rng.as_mut().unwrap().below(d),
        };
        let mut w = layer.weight.clone();
        w.zero_row(row);
        out.set_weight(i, w)?;
        zeroed += layer.weight.cols();
        removed.push(RemovedRow {
            layer: layer.name.clone(),
            row,
            norm: norms[row],
        });
    }
    Ok((
        out,
        RemovalReport {
            strategy,
            removed,
            total_sparsity: zeroed as f64 / model.total_params() as f64,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StressArm {
    OutlierDense,
    Random { seed: Seed },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressLayer {
    pub layer: String,
    pub rows: Vec<usize>,
    pub outlier_counts: Vec<usize>,
    pub pruned_per_row: usize,
    /// `cosim_flat` of the layer output, stressed vs dense.
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub arm: StressArm,
    pub m: f64,
    pub top_frac: f64,
    pub row_sparsity: f64,
    pub layers: Vec<StressLayer>,
    pub total_sparsity: f64,
}

/// Rows ordered by outlier count (descending, ties to the lower index),
/// truncated to `k`.
pub fn top_outlier_rows(counts: &[usize], k: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..counts.len()).collect();
    rows.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    rows.truncate(k);
    rows
}

/// Heavily prunes a fraction of each layer's rows and leaves the others
/// dense.
///
/// Scores are Wanda scores from `x_per_layer`. The outlier-dense arm takes
/// the `ceil(top_frac·D)` rows with the most outlier positions
/// (`A_ij > M·mean(A)`); the random arm draws the same number of rows from a
/// seeded generator. Each selected row loses its `round(row_sparsity·N)`
/// lowest-scoring weights.
pub fn outlier_dense_stress<T: Scalar>(
    model: &ToyModel<T>,
    x_per_layer: &[Matrix<T>],
    m: f64,
    top_frac: f64,
    row_sparsity: f64,
    arm: StressArm,
) -> Result<(ToyModel<T>, StressReport)> {
    if !(top_frac > 0.0 && top_frac < 1.0) {
        return Err(TrimError::contract(format!("top_frac {top_frac} outside (0, 1)")));
    }
    if !(0.0..=1.0).contains(&row_sparsity) {
        return Err(TrimError::contract(format!("row sparsity {row_sparsity} outside [0, 1]")));
    }
    if x_per_layer.len() != model.len() {
        return Err(TrimError::shape(format!(
            "{} activation batches for {} layers",
            x_per_layer.len(),
            model.len()
        )));
    }
    let mut rng = match arm {
        StressArm::Random { seed } => Some(DetRng::new(seed)),
        StressArm::OutlierDense => None,
    };
    let mut out = model.clone();
    let mut layers = Vec::with_capacity(model.len());
    let mut pruned_total = 0usize;
    for (i, layer) in model.layers().iter().enumerate() {
        let w = &layer.weight;
        let (d, n) = w.shape();
        let a = score_wanda(w, &x_per_layer[i])?;
        let counts = per_dimension_outlier_counts(&a, m);
        let k = ((top_frac * d as f64) - 1e-9).ceil().max(1.0) as usize;
        let rows = match rng.as_mut() {
            None => top_outlier_rows(&counts, k),
            Some(r) => r.sample_indices(d, k),
        };
        let per_row = (row_sparsity * n as f64).round_ties_even() as usize;
        let mut row_counts = vec![0usize; d];
        for &r in &rows {
            row_counts[r] = per_row;
        }
        let mask = mask_from_row_counts(a.scores(), &row_counts)?;
        let pw = apply_mask(w, &mask)?;
        let quality = qmetric(&w.matmul(&x_per_layer[i])?, &pw.matmul(&x_per_layer[i])?, LayerMetric::CosimFlat)?.value;
        out.set_weight(i, pw)?;
        pruned_total += mask.pruned_count();
        layers.push(StressLayer {
            layer: layer.name.clone(),
            outlier_counts: rows.iter().map(|&r| counts[r]).collect(),
            rows,
            pruned_per_row: per_row,
            quality,
        });
    }
    Ok((
        out,
        StressReport {
            arm,
            m,
            top_frac,
            row_sparsity,
            layers,
            total_sparsity: pruned_total as f64 / model.total_params() as f64,
        },
    ))
}
