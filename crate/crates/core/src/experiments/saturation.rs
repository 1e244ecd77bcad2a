//! Which heads attend (almost) one-hot to a single token.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Result};
use crate::model::{forward, AttentionConfig, AttentionWeights, Dataset};

pub const MAX_COEFFICIENT_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SaturationReport {
    pub threshold: f64,
    /// `flags[t][h]`: head `h` has a coefficient above the threshold on example `t`.
    pub flags: Vec<Vec<bool>>,
    /// `max_coefficients[t][h]`
    pub max_coefficients: Vec<Vec<f64>>,
    /// Entry `k`: number of examples with exactly `k` saturated heads.
    pub saturated_head_histogram: Vec<usize>,
    /// Counts of all `T H` maximum coefficients in equal bins over `[0, 1]`.
    pub max_coefficient_histogram: Vec<usize>,
}

impl SaturationReport {
    /// Fraction of examples outside `excluded` on which head `h` is saturated.
    pub fn saturated_fraction(&self, head: usize, excluded: &[usize]) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for (t, row) in self.flags.iter().enumerate() {
            if !excluded.contains(&t) {
                total += 1;
                hit += row[head] as usize;
            }
        }
        if total == 0 {
            1.0
        } else {
            hit as f64 / total as f64
        }
    }
}

/// Flags every `(example, head)` pair whose largest attention coefficient
/// exceeds `threshold`, which must lie in `(1/n, 1)`.
pub fn saturation_report(
    w: &AttentionWeights,
    cfg: &AttentionConfig,
    data: &Dataset,
    threshold: f64,
) -> Result<SaturationReport> {
    let n = data.dims().n as f64;
    if !(threshold > 1.0 / n && threshold < 1.0) {
        return Err(arg_err!("threshold {threshold} outside (1/n, 1) = ({}, 1)", 1.0 / n));
    }
    let mut flags = Vec::with_capacity(data.len());
    let mut max_coefficients = Vec::with_capacity(data.len());
    let mut per_example = vec![0usize; cfg.heads + 1];
    let mut hist = vec![0usize; MAX_COEFFICIENT_BINS];
    for ex in data.examples() {
        let tr = forward(w, cfg, &ex.context, &ex.query)?;
        let maxes: Vec<f64> = tr
            .heads
            .iter()
            .map(|h| h.coefficients.iter().cloned().fold(0.0, f64::max))
            .collect();
        let row: Vec<bool> = maxes.iter().map(|&m| m > threshold).collect();
        per_example[row.iter().filter(|&&b| b).count()] += 1;
        for &m in &maxes {
            let bin = ((m * MAX_COEFFICIENT_BINS as f64) as usize).min(MAX_COEFFICIENT_BINS - 1);
            hist[bin] += 1;
        }
        flags.push(row);
        max_coefficients.push(maxes);
    }
    Ok(SaturationReport {
        threshold,
        flags,
        max_coefficients,
        saturated_head_histogram: per_example,
        max_coefficient_histogram: hist,
    })
}
