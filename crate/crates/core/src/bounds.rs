//! Closed-form capacity bounds and the empirical rank of `Z`.
//!
//! | bound | value |
//! |---|---|
//! | lower, generic data | `H (min(n, d_h) - 1) + 1` |
//! | lower, queries of Kruskal rank `Q` | `H (min(Q, d_h) - 1) + 1` |
//! | `rank(Z)`, shared context | `H (n - 1) + 1` |
//! | `rank(Z)`, constant-sum context tokens | `H (d - 1) + 1` |
//! | one-hidden-layer ReLU net, width `m` | `floor((n + 1) m / d_out) + m + 1` |

use alloc::vec::Vec;

use crate::error::{arg_err, Result};
use crate::model::{feature_matrix, AttentionConfig, AttentionWeights, Dataset, Example};
use crate::numerics::{numerical_rank, RankTolerance};
use crate::random::{seeded, uniform_matrix, uniform_vec};

pub fn theorem1_lower_bound(heads: usize, n: usize, d_h: usize) -> usize {
    heads * (n.min(d_h).max(1) - 1) + 1
}

pub fn remark1_lower_bound(heads: usize, q: usize, d_h: usize) -> usize {
    heads * (q.min(d_h).max(1) - 1) + 1
}

pub fn prop2_upper_bound(heads: usize, n: usize) -> usize {
    heads * (n.max(1) - 1) + 1
}

pub fn prop5_upper_bound(heads: usize, d: usize) -> usize {
    heads * (d.max(1) - 1) + 1
}

/// Integer semantics: the division is floored before adding `m + 1`.
pub fn relu_upper_bound(n: usize, m: usize, d_out: usize) -> usize {
    (n + 1) * m / d_out.max(1) + m + 1
}

/// Shape for which bounds are requested. `m` and `q` are optional extras.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundQuery {
    pub heads: usize,
    pub n: usize,
    pub d: usize,
    pub d_h: usize,
    pub d_v: usize,
    pub d_out: usize,
    /// Hidden width of the comparison ReLU network.
    pub m: Option<usize>,
    /// Measured Kruskal rank of the queries.
    pub q: Option<usize>,
}

impl BoundQuery {
    pub fn validate(&self) -> Result<()> {
        if [self.heads, self.n, self.d, self.d_h, self.d_v, self.d_out].contains(&0)
            || self.m == Some(0)
            || self.q == Some(0)
        {
            return Err(arg_err!("all counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundSummary {
    pub theorem1_lower: usize,
    pub remark1_lower: Option<usize>,
    pub shared_context_rank_upper: usize,
    pub constant_sum_rank_upper: usize,
    pub relu_upper: Option<usize>,
    /// Parameter count of the attention layer with these shapes.
    pub attention_parameters: usize,
}

pub fn evaluate_bounds(q: &BoundQuery) -> Result<BoundSummary> {
    q.validate()?;
    Ok(BoundSummary {
        theorem1_lower: theorem1_lower_bound(q.heads, q.n, q.d_h),
        remark1_lower: q.q.map(|k| remark1_lower_bound(q.heads, k, q.d_h)),
        shared_context_rank_upper: prop2_upper_bound(q.heads, q.n),
        constant_sum_rank_upper: prop5_upper_bound(q.heads, q.d),
        relu_upper: q.m.map(|m| relu_upper_bound(q.n, m, q.d_out)),
        attention_parameters: q.heads * (2 * q.d * q.d_h + q.d * q.d_v + q.d_v * q.d) + q.d * q.d_out,
    })
}

/// `numerical_rank(Z)` at the given weights.
pub fn empirical_rank_z(w: &AttentionWeights, cfg: &AttentionConfig, data: &Dataset, tol: RankTolerance) -> Result<usize> {
    numerical_rank(&feature_matrix(w, cfg, data)?, tol)
}

/// Moves `x` onto `{x : 1ᵀx = c}` along the all-ones direction.
pub fn project_to_constant_sum(x: &mut [f64], c: f64) {
    let shift = (c - x.iter().sum::<f64>()) / x.len() as f64;
    x.iter_mut().for_each(|v| *v += shift);
}

/// Uniform tokens with every context row projected to sum `c`; queries are
/// left unconstrained. Regression labels.
pub fn gen_constant_sum_dataset(t: usize, n: usize, d: usize, c: f64, seed: u64) -> Result<Dataset> {
    if t == 0 || n == 0 || n >= d {
        return Err(arg_err!("need T >= 1 and 1 <= n < d"));
    }
    let mut rng = seeded(seed);
    let examples: Vec<Example> = (0..t)
        .map(|_| {
            let mut context = uniform_matrix(&mut rng, n, d);
            for i in 0..n {
                project_to_constant_sum(context.row_mut(i), c);
            }
            Example {
                context,
                query: uniform_vec(&mut rng, d),
                label: uniform_vec(&mut rng, 1),
            }
        })
        .collect();
    Dataset::new(examples, Some(crate::model::Task::Regression))
}
