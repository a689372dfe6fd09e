//! Sparsity vectors, integer prune counts and prune masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrimError};
use crate::scalar::Scalar;
use crate::scoring::ScoreMatrix;
use crate::tensor::Matrix;

/// Default ceiling on any single row's sparsity.
pub const DEFAULT_CUTOFF: f64 = 0.95;

/// Tolerance on `mean(s) == target`.
pub const MEAN_TOLERANCE: f64 = 1e-9;

/// Per-row sparsity targets whose mean equals the layer budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityVector {
    values: Vec<f64>,
    target: f64,
    cutoff: f64,
}

impl SparsityVector {
    pub fn new(values: Vec<f64>, target: f64, cutoff: f64) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff <= 1.0) {
            return Err(TrimError::contract(format!("cutoff must lie in (0, 1], got {cutoff}")));
        }
        if !(0.0..1.0).contains(&target) {
            return Err(TrimError::contract(format!("target must lie in [0, 1), got {target}")));
        }
        if values.is_empty() {
            return Err(TrimError::contract("sparsity vector is empty"));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0 && **v <= cutoff))
        {
            return Err(TrimError::contract(format!(
                "s[{i}] = {v} outside [0, {cutoff}]"
            )));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        if (mean - target).abs() > MEAN_TOLERANCE {
            return Err(TrimError::Budget(format!(
                "mean sparsity {mean} differs from target {target}"
            )));
        }
        Ok(SparsityVector { values, target, cutoff })
    }

    /// Every row at `target`.
    pub fn uniform(rows: usize, target: f64, cutoff: f64) -> Result<Self> {
        Self::new(vec![target; rows], target, cutoff)
    }

    /// Uses the mean of `values` as the target.
    pub fn from_values(values: Vec<f64>, cutoff: f64) -> Result<Self> {
        let target = values.iter().sum::<f64>() / values.len().max(1) as f64;
        Self::new(values, target, cutoff)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn is_uniform(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }
}

/// The set of weights ranked against each other when picking what to prune.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ComparisonGroup {
    WholeLayer,
    InputBlock { block_size: usize },
    PerOutput,
}

impl ComparisonGroup {
    pub const DEFAULT_BLOCK: usize = 128;

    pub fn input_block(block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(TrimError::contract("block size must be >= 1"));
        }
        Ok(ComparisonGroup::InputBlock { block_size })
    }
}

impl fmt::Display for ComparisonGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComparisonGroup::WholeLayer => f.write_str("whole_layer"),
            ComparisonGroup::InputBlock { block_size } => write!(f, "input_block:{block_size}"),
            ComparisonGroup::PerOutput => f.write_str("per_output"),
        }
    }
}

impl FromStr for ComparisonGroup {
    type Err = TrimError;

    /// Accepts `whole_layer`, `per_output`, `input_block` (block 128) and
    /// `input_block:<n>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole_layer" => Ok(ComparisonGroup::WholeLayer),
            "per_output" => Ok(ComparisonGroup::PerOutput),
            "input_block" => Ok(ComparisonGroup::InputBlock {
                block_size: Self::DEFAULT_BLOCK,
            }),
            _ => {
                let n = s
                    .strip_prefix("input_block:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| TrimError::contract(format!("unknown comparison group {s:?}")))?;
                ComparisonGroup::input_block(n)
            }
        }
    }
}

/// Boolean prune mask; `true` marks a removed weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
    pruned_count: usize,
}

impl PruneMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        PruneMask {
            rows,
            cols,
            mask: vec![false; rows * cols],
            pruned_count: 0,
        }
    }

    pub fn from_bools(rows: usize, cols: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != rows * cols {
            return Err(TrimError::shape(format!(
                "mask for {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                mask.len()
            )));
        }
        let pruned_count = mask.iter().filter(|&&b| b).count();
        Ok(PruneMask {
            rows,
            cols,
            mask,
            pruned_count,
        })
    }

    /// Reads a 0.0/1.0 matrix (nonzero = pruned).
    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Result<Self> {
        Self::from_bools(
            m.rows(),
            m.cols(),
            m.as_slice().iter().map(|&v| v != T::zero()).collect(),
        )
    }

    /// 1.0 for pruned, 0.0 for kept.
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.mask
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask values are finite")
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pruned_count(&self) -> usize {
        self.pruned_count
    }

    #[inline]
    pub fn is_pruned(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.mask[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_counts(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| self.row(i).iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn set(&mut self, i: usize, j: usize, pruned: bool) {
        let slot = &mut self.mask[i * self.cols + j];
        match (*slot, pruned) {
            (false, true) => self.pruned_count += 1,
            (true, false) => self.pruned_count -= 1,
            _ => {}
        }
        *slot = pruned;
    }

    /// Fraction of entries pruned.
    pub fn sparsity(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.pruned_count as f64 / self.mask.len() as f64
        }
    }
}

/// Largest-remainder apportionment of `total` units over `quotas`.
///
/// Each slot first receives `floor(quota)` (capped by `caps`); remaining
/// units go to the largest fractional remainders, ties to the lower index.
/// Slots whose quota is already an integer, or that sit at their cap, are
/// skipped unless nothing else can absorb the remainder.
pub fn apportion(quotas: &[f64], total: usize, caps: &[usize]) -> Result<Vec<usize>> {
    debug_assert_eq!(quotas.len(), caps.len());
    let capacity: usize = caps.iter().sum();
    if total > capacity {
        return Err(TrimError::Budget(format!(
            "budget of {total} exceeds capacity {capacity}"
        )));
    }
    let mut counts: Vec<usize> = quotas
        .iter()
        .zip(caps)
        .map(|(&q, &cap)| (q.max(0.0).floor() as usize).min(cap))
        .collect();
    let remainders: Vec<f64> = quotas.iter().map(|&q| q.max(0.0) - q.max(0.0).floor()).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]).then(a.cmp(&b)));

    let assigned: usize = counts.iter().sum();
    if assigned < total {
        let mut deficit = total - assigned;
        // first pass: round fractional quotas up
        for &i in &order {
            if deficit == 0 {
                break;
            }
            if remainders[i] > 0.0 && counts[i] < caps[i] {
                counts[i] += 1;
                deficit -= 1;
            }
        }
        // fallback: any slot with headroom, same order
        while deficit > 0 {
            let before = deficit;
            for &i in &order {
                if deficit == 0 {
                    break;
                }
                if counts[i] < caps[i] {
                    counts[i] += 1;
                    deficit -= 1;
                }
            }
            if deficit == before {
                return Err(TrimError::Budget("apportionment could not place all units".into()));
            }
        }
    } else if assigned > total {
        // floating-point slack can put the floors above the rounded total
        let mut excess = assigned - total;
        for &i in order.iter().rev() {
            while excess > 0 && counts[i] > 0 {
                counts[i] -= 1;
                excess -= 1;
                if remainders[i] > 0.0 {
                    break;
                }
            }
            if excess == 0 {
                break;
            }
        }
    }
    Ok(counts)
}

/// Largest row count allowed by `cutoff` for rows of length `n_cols`.
pub fn row_cap(cutoff: f64, n_cols: usize) -> usize {
    ((cutoff * n_cols as f64) + 1e-9).floor() as usize
}

/// Per-row integer prune counts for a sparsity vector.
///
/// The total is `round(T·D·N)` (ties to even); rows receive a
/// largest-remainder split of `S_i·N`, never above `floor(cutoff·N)`.
pub fn round_counts(s: &SparsityVector, n_cols: usize) -> Result<Vec<usize>> {
    let d = s.len();
    let total = (s.target() * (d * n_cols) as f64).round_ties_even() as usize;
    let quotas: Vec<f64> = s.values().iter().map(|&v| v * n_cols as f64).collect();
    let caps = vec![row_cap(s.cutoff(), n_cols); d];
    apportion(&quotas, total, &caps)
}

/// Marks the `count` lowest-scoring entries of `cells`, ordered by
/// (score, row, column).
fn prune_lowest<T: Scalar>(scores: &Matrix<T>, cells: &mut [(usize, usize)], count: usize, mask: &mut PruneMask) {
    cells.sort_by(|&(ai, aj), &(bi, bj)| {
        scores
            .get(ai, aj)
            .widen()
            .total_cmp(&scores.get(bi, bj).widen())
            .then((ai, aj).cmp(&(bi, bj)))
    });
    for &(i, j) in cells.iter().take(count) {
        mask.set(i, j, true);
    }
}

/// Prunes each row `i` at exactly `counts[i]` lowest-scoring weights.
pub fn mask_from_row_counts<T: Scalar>(scores: &Matrix<T>, counts: &[usize]) -> Result<PruneMask> {
    let (d, n) = scores.shape();
    if counts.len() != d {
        return Err(TrimError::shape(format!("{} row counts for {d} rows", counts.len())));
    }
    if let Some(i) = counts.iter().position(|&k| k > n) {
        return Err(TrimError::contract(format!("row {i} count {} exceeds {n} columns", counts[i])));
    }
    let mut mask = PruneMask::empty(d, n);
    let mut cells: Vec<(usize, usize)> = Vec::with_capacity(n);
    for (i, &k) in counts.iter().enumerate() {
        cells.clear();
        cells.extend((0..n).map(|j| (i, j)));
        prune_lowest(scores, &mut cells, k, &mut mask);
    }
    Ok(mask)
}

/// Builds a prune mask from scores, a sparsity prescription and a
/// comparison group.
///
/// `PerOutput` honors non-uniform vectors through [`round_counts`]. The other
/// groups require a uniform vector; each group `g` gets a largest-remainder
/// share of `round(T·D·N)` proportional to its size, so the layer total is
/// the same under every group.
pub fn build_mask<T: Scalar>(a: &ScoreMatrix<T>, s: &SparsityVector, group: ComparisonGroup) -> Result<PruneMask> {
    let scores = a.scores();
    let (d, n) = scores.shape();
    if s.len() != d {
        return Err(TrimError::shape(format!("sparsity vector of {} for {d} rows", s.len())));
    }
    if group != ComparisonGroup::PerOutput && !s.is_uniform() {
        return Err(TrimError::contract(format!(
            "non-uniform sparsity requires per_output comparison, got {group}"
        )));
    }
    match group {
        ComparisonGroup::PerOutput => mask_from_row_counts(scores, &round_counts(s, n)?),
        ComparisonGroup::WholeLayer | ComparisonGroup::InputBlock { .. } => {
            let block = match group {
                ComparisonGroup::InputBlock { block_size } => block_size,
                _ => n.max(1),
            };
            let blocks: Vec<(usize, usize)> = (0..n)
                .step_by(block.max(1))
                .map(|start| (start, (start + block).min(n)))
                .collect();
            let total = (s.target() * (d * n) as f64).round_ties_even() as usize;
            let sizes: Vec<usize> = blocks.iter().map(|&(a, b)| d * (b - a)).collect();
            let quotas: Vec<f64> = sizes.iter().map(|&sz| s.target() * sz as f64).collect();
            let counts = apportion(&quotas, total, &sizes)?;
            let mut mask = PruneMask::empty(d, n);
            for (&(start, end), &k) in blocks.iter().zip(&counts) {
                let mut cells: Vec<(usize, usize)> = (0..d)
                    .flat_map(|i| (start..end).map(move |j| (i, j)))
                    .collect();
                prune_lowest(scores, &mut cells, k, &mut mask);
            }
            Ok(mask)
        }
    }
}

/// Zeroes masked weights, leaving the rest bit-identical.
pub fn apply_mask<T: Scalar>(w: &Matrix<T>, m: &PruneMask) -> Result<Matrix<T>> {
    if w.shape() != m.shape() {
        return Err(TrimError::shape(format!("weights {:?} vs mask {:?}", w.shape(), m.shape())));
    }
    Matrix::from_vec(
        w.rows(),
        w.cols(),
        w.as_slice()
            .iter()
            .zip(m.as_slice())
            .map(|(&v, &p)| if p { T::zero() } else { v })
            .collect(),
    )
}
