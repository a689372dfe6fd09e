//! Box-constrained mean projection shared by the row-level optimizer and
//! the layer-level allocator.

use crate::error::{Result, TrimError};

/// Clamps `values` into `[lo, hi]`, then moves the weighted mean back to
/// `target` by shifting every entry toward the bound on the needed side in
/// proportion to its remaining headroom.
///
/// With `e` the missing mass, each entry moves by `β·(hi − s_i)` (or
/// `β·(s_i − lo)` when mass must be removed) for a single `β ∈ [0, 1]`, so
/// the result stays inside the box, keeps the order of the inputs and
/// reaches the target in one pass. Entries already at the relevant bound do
/// not move.
pub fn project_weighted_mean(values: &[f64], weights: &[f64], target: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if values.len() != weights.len() || values.is_empty() {
        return Err(TrimError::shape("projection needs matching, nonempty values and weights"));
    }
    if !(lo <= target && target <= hi) {
        return Err(TrimError::Budget(format!("target {target} outside [{lo}, {hi}]")));
    }
    let total_w: f64 = weights.iter().sum();
    if !(total_w > 0.0) || weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(TrimError::contract("projection weights must be nonnegative with a positive sum"));
    }
    let mut s: Vec<f64> = values.iter().map(|&v| v.clamp(lo, hi)).collect();
    let mass: f64 = s.iter().zip(weights).map(|(v, w)| v * w).sum();
    let missing = target * total_w - mass;
    if missing > 0.0 {
        let room: f64 = s.iter().zip(weights).map(|(v, w)| (hi - v) * w).sum();
        if room < missing * (1.0 - 1e-12) {
            return Err(TrimError::Budget(format!(
                "cannot raise mean to {target}: all entries saturate at {hi}"
            )));
        }
        let beta = (missing / room).min(1.0);
        for v in &mut s {
            *v += beta * (hi - *v);
        }
    } else if missing < 0.0 {
        let room: f64 = s.iter().zip(weights).map(|(v, w)| (*v - lo) * w).sum();
        if room < -missing * (1.0 - 1e-12) {
            return Err(TrimError::Budget(format!(
                "cannot lower mean to {target}: all entries saturate at {lo}"
            )));
        }
        let beta = (-missing / room).min(1.0);
        for v in &mut s {
            *v -= beta * (*v - lo);
        }
    }
    Ok(s)
}

/// Unweighted form of [`project_weighted_mean`].
pub fn project_mean(values: &[f64], target: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    project_weighted_mean(values, &vec![1.0; values.len()], target, lo, hi)
}
