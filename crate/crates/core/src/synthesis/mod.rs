//! Explicit weights that memorize a dataset.
//!
//! The first head fits `r = min(n, d_h)` examples exactly through interior
//! attention targets. Every later head takes up to `r - 1` examples whose rows
//! of the accumulated feature matrix `Z` are still dependent, fits them the
//! same way, and pushes all other examples to saturated (one-hot) attention
//! with a rank-one term `c W⁺` that vanishes on the fitted queries. Once
//! `rank(Z) = T`, the value weights come from one least-squares solve.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::assumptions::{check_assumption1, check_assumption2, SamplingParams};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::model::{
    attended_block, feature_matrix, forward, softmax, AttentionConfig, AttentionWeights, Dataset, Example, HeadWeights,
};
use crate::numerics::{
    axpy, dot, factor_bounded_rank, least_squares_solve, norm2, numerical_rank, orthogonal_complement_basis,
    singular_values, spectral_norm, Matrix, RankTolerance,
};
use crate::random::{gaussian_vec, seeded_stream, Rng64};

#[cfg(test)]
mod tests;

/// Smallest target probability handed to the softmax inversion.
const TARGET_FLOOR: f64 = 1e-3;
/// Protected queries must satisfy `|wᵀe| <= PROTECTED_RESIDUAL * |e|`.
const PROTECTED_RESIDUAL: f64 = 1e-10;
/// Pairwise logit separation required of `W⁺`, relative to its largest logit.
const LOGIT_MARGIN: f64 = 1e-6;
const FACTOR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthesisConfig {
    pub model: AttentionConfig,
    pub tol: RankTolerance,
    /// Required closeness `|theta - onehot|_1` of saturated examples.
    pub delta: f64,
    pub c_max: f64,
    pub retry_budget: usize,
    pub seed: u64,
    /// Sampling protocol for the query check.
    pub assumption_trials: usize,
    pub pass_fraction: f64,
    /// Assume only this Kruskal rank for the queries. Each head then fits
    /// `min(q, n, d_h) - 1` examples.
    pub query_kruskal_rank: Option<usize>,
    /// Largest relative error accepted by the final forward-pass check.
    pub verify_tol: f64,
}

impl SynthesisConfig {
    pub fn new(model: AttentionConfig) -> Self {
        Self {
            model,
            tol: RankTolerance::default(),
            delta: 1e-9,
            c_max: 1_099_511_627_776.0,
            retry_budget: 64,
            seed: 0,
            assumption_trials: 5000,
            pass_fraction: 0.99,
            query_kruskal_rank: None,
            verify_tol: 1e-6,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(arg_err!("delta must be positive, got {}", self.delta));
        }
        if !(self.c_max >= 1.0) {
            return Err(arg_err!("c_max must be at least 1, got {}", self.c_max));
        }
        if self.retry_budget == 0 || self.assumption_trials == 0 {
            return Err(arg_err!("retry budget and assumption trials must be positive"));
        }
        if self.query_kruskal_rank == Some(0) {
            return Err(arg_err!("query Kruskal rank must be positive"));
        }
        Ok(())
    }

    /// `r`: examples fitted by the first head.
    pub fn per_head_rank(&self, n: usize) -> usize {
        let r = n.min(self.model.d_h);
        self.query_kruskal_rank.map_or(r, |q| r.min(q))
    }

    /// `H (r - 1) + 1`.
    pub fn capacity(&self, n: usize) -> usize {
        self.model.heads * (self.per_head_rank(n) - 1) + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadReport {
    pub head: usize,
    /// Examples this head fits with interior attention.
    pub assigned: Vec<usize>,
    /// `rank(Z)` over the previous heads.
    pub rank_before: usize,
    pub rank_after: usize,
    /// Scale of the saturating term, if one was added.
    pub scale: Option<f64>,
    /// Worst `|theta - onehot|_1` over the examples outside `assigned`.
    pub saturation_gap: Option<f64>,
    /// Smallest top-two logit gap of `W⁺` outside `assigned`.
    pub logit_margin: Option<f64>,
    /// Closed-form sufficient `delta` from the elimination, for comparison.
    pub delta_bound: Option<f64>,
    /// Rank of the eliminated block of the assigned rows.
    pub block_rank: usize,
    pub attempts: usize,
    pub factorization_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthesisReport {
    pub r: usize,
    pub capacity: usize,
    pub heads: Vec<HeadReport>,
    pub final_rank: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

impl SynthesisReport {
    pub fn assigned_disjoint(&self) -> bool {
        let mut seen = Vec::new();
        for h in &self.heads {
            for &t in &h.assigned {
                if seen.contains(&t) {
                    return false;
                }
                seen.push(t);
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Verification {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Logits `alpha` with `softmax(alpha) = theta` and `sum(alpha) = 0`.
pub fn invert_softmax_targets(theta: &[f64]) -> Result<Vec<f64>> {
    if theta.is_empty() {
        return Err(arg_err!("empty target"));
    }
    if let Some(x) = theta.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(arg_err!("target entries must be strictly positive, found {x}"));
    }
    let sum: f64 = theta.iter().sum();
    if libm::fabs(sum - 1.0) > 1e-9 {
        return Err(arg_err!("target sums to {sum}, expected 1"));
    }
    let logs: Vec<f64> = theta.iter().map(|&x| libm::log(x)).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    Ok(logs.into_iter().map(|x| x - mean).collect())
}

/// `W` of rank at most `m` with `softmax(E⁽ᵗ⁾ W e⁽ᵗ⁾) = target⁽ᵗ⁾` for the `m`
/// given examples.
pub fn solve_head_for_targets(
    examples: &[&Example],
    targets: &[Vec<f64>],
    d_h: usize,
    tol: RankTolerance,
) -> Result<Matrix> {
    let first = examples.first().ok_or_else(|| arg_err!("no examples to fit"))?;
    let (n, d) = first.context.shape();
    let m = examples.len();
    if targets.len() != m {
        return Err(dim_err!("{m} examples but {} targets", targets.len()));
    }
    if m > n.min(d_h) {
        return Err(arg_err!("cannot fit {m} examples in one head with n={n}, d_h={d_h}"));
    }
    let mut betas = Matrix::zeros(m, d);
    for (i, (ex, theta)) in examples.iter().zip(targets).enumerate() {
        if ex.context.shape() != (n, d) || theta.len() != n {
            return Err(dim_err!("example {i} does not match n={n}, d={d}"));
        }
        if numerical_rank(&ex.context, tol)? < n {
            return Err(Error::AssumptionFailed {
                assumption: "full-rank context",
                detail: alloc::format!("context {i} of the fitted block is rank deficient"),
            });
        }
        let alpha = invert_softmax_targets(theta)?;
        let beta = least_squares_solve(&ex.context, &Matrix::column_vector(&alpha), tol)?;
        betas.row_mut(i).copy_from_slice(beta.as_slice());
    }
    let queries = Matrix::from_rows(&examples.iter().map(|e| e.query.as_slice()).collect::<Vec<_>>())?;
    if numerical_rank(&queries, tol)? < m {
        return Err(Error::AssumptionFailed {
            assumption: "independent queries",
            detail: alloc::format!("the {m} fitted queries are linearly dependent"),
        });
    }
    // W Q = B  <=>  Qᵀ Wᵀ = Bᵀ with Q = [e_1 ... e_m], B = [beta_1 ... beta_m].
    Ok(least_squares_solve(&queries, &betas, tol)?.transpose())
}

/// Rank-one `W⁺ = gamma wᵀ` with `w` orthogonal to every protected query and
/// pairwise distinct logits on all other examples. Scaled so the smallest
/// top-two logit gap outside `protected` is 1.
pub fn construct_w_plus(
    data: &Dataset,
    protected: &[usize],
    tol: RankTolerance,
    seed: u64,
    retry_budget: usize,
) -> Result<Matrix> {
    let n = data.dims().n;
    if protected.len() + 1 > n {
        return Err(arg_err!("at most n-1 = {} protected examples, got {}", n - 1, protected.len()));
    }
    build_w_plus(data, protected, tol, &mut seeded_stream(seed, 0), retry_budget)
}

fn build_w_plus<R: Rng + ?Sized>(
    data: &Dataset,
    protected: &[usize],
    tol: RankTolerance,
    rng: &mut R,
    retry_budget: usize,
) -> Result<Matrix> {
    let d = data.dims().d;
    let guarded = if protected.is_empty() {
        Matrix::zeros(0, d)
    } else {
        Matrix::from_rows(&protected.iter().map(|&t| data.example(t).query.as_slice()).collect::<Vec<_>>())?
    };
    let complement = orthogonal_complement_basis(&guarded, tol)?;
    if complement.rows() == 0 {
        return Err(arg_err!("protected queries span the whole space"));
    }
    let free: Vec<usize> = (0..data.len()).filter(|t| !protected.contains(t)).collect();
    for _ in 0..retry_budget {
        let mut w = complement.tr_mul_vec(&gaussian_vec(rng, complement.rows()))?;
        // Second orthogonalization pass against the protected queries.
        for q in guarded.row_iter() {
            let qq = dot(q, q);
            if qq > 0.0 {
                axpy(-dot(q, &w) / qq, q, &mut w);
            }
        }
        let wn = norm2(&w);
        if wn == 0.0 {
            continue;
        }
        w.iter_mut().for_each(|x| *x /= wn);
        if protected
            .iter()
            .any(|&t| libm::fabs(dot(&w, &data.example(t).query)) > PROTECTED_RESIDUAL * norm2(&data.example(t).query))
        {
            continue;
        }
        let gamma = gaussian_vec(rng, d);
        let logits: Vec<Vec<f64>> = free
            .iter()
            .map(|&t| {
                let ex = data.example(t);
                let s = dot(&w, &ex.query);
                ex.context.mul_vec(&gamma).map(|v| v.into_iter().map(|x| x * s).collect())
            })
            .collect::<Result<_>>()?;
        let scale = logits.iter().flatten().fold(0.0f64, |a, &x| a.max(libm::fabs(x)));
        if free.is_empty() {
            return Ok(outer(&gamma, &w));
        }
        if !(scale > 0.0) {
            continue;
        }
        let min_pair = logits.iter().map(|l| min_pairwise_gap(l)).fold(f64::INFINITY, f64::min);
        if min_pair < LOGIT_MARGIN * scale {
            continue;
        }
        let min_top = logits.iter().map(|l| top_gap(l)).fold(f64::INFINITY, f64::min);
        let gamma: Vec<f64> = gamma.iter().map(|g| g / min_top).collect();
        return Ok(outer(&gamma, &w));
    }
    Err(Error::BudgetExhausted {
        head: 0,
        stage: "saturation direction",
        attempts: retry_budget,
    })
}

fn outer(a: &[f64], b: &[f64]) -> Matrix {
    Matrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

fn min_pairwise_gap(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn top_gap(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    if s.len() < 2 {
        f64::INFINITY
    } else {
        s[0] - s[1]
    }
}

/// Attention of one head along `W* + c W⁺` for every example.
///
/// Protected examples have their `W⁺` contribution checked to vanish and then
/// dropped, so their logits are identical for every `c`.
#[derive(Debug, Clone)]
pub struct SaturationPath {
    base: Vec<Vec<f64>>,
    direction: Vec<Vec<f64>>,
    protected: Vec<bool>,
    argmax: Vec<usize>,
}

impl SaturationPath {
    pub fn new(w_star: &Matrix, w_plus: &Matrix, data: &Dataset, protected: &[usize]) -> Result<Self> {
        let mut mask = vec![false; data.len()];
        for &t in protected {
            *mask.get_mut(t).ok_or_else(|| arg_err!("protected index {t} out of range"))? = true;
        }
        let mut base = Vec::with_capacity(data.len());
        let mut direction = Vec::with_capacity(data.len());
        let mut argmax = Vec::with_capacity(data.len());
        for (t, ex) in data.examples().iter().enumerate() {
            base.push(ex.context.mul_vec(&w_star.mul_vec(&ex.query)?)?);
            let mut dir = ex.context.mul_vec(&w_plus.mul_vec(&ex.query)?)?;
            if mask[t] {
                let size = ex.context.max_abs() * w_plus.max_abs() * norm2(&ex.query) * ex.context.cols() as f64;
                let worst = dir.iter().fold(0.0f64, |a, &x| a.max(libm::fabs(x)));
                if worst > PROTECTED_RESIDUAL * size.max(f64::MIN_POSITIVE) {
                    return Err(arg_err!("W⁺ does not vanish on protected example {t} (logit {worst:e})"));
                }
                dir.iter_mut().for_each(|x| *x = 0.0);
            }
            argmax.push(crate::model::argmax(&dir));
            direction.push(dir);
        }
        Ok(Self {
            base,
            direction,
            protected: mask,
            argmax,
        })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn is_protected(&self, t: usize) -> bool {
        self.protected[t]
    }

    /// Token that example `t` saturates onto.
    pub fn saturated_token(&self, t: usize) -> usize {
        self.argmax[t]
    }

    pub fn logits(&self, t: usize, c: f64) -> Vec<f64> {
        if self.protected[t] {
            return self.base[t].clone();
        }
        self.base[t].iter().zip(&self.direction[t]).map(|(a, l)| a + c * l).collect()
    }

    pub fn coefficients(&self, t: usize, c: f64) -> Vec<f64> {
        softmax(&self.logits(t, c))
    }

    /// `|theta - onehot|_1` for an unprotected example, computed as twice the
    /// mass off the saturated token.
    pub fn l1_gap(&self, t: usize, c: f64) -> f64 {
        let theta = self.coefficients(t, c);
        let a = self.argmax[t];
        2.0 * theta.iter().enumerate().filter(|&(j, _)| j != a).map(|(_, x)| x).sum::<f64>()
    }

    /// Worst `l1_gap` over unprotected examples (0 if there are none).
    pub fn max_l1_gap(&self, c: f64) -> f64 {
        (0..self.len())
            .filter(|&t| !self.protected[t])
            .map(|t| self.l1_gap(t, c))
            .fold(0.0, f64::max)
    }

    /// Smallest top-two gap of the saturating logits.
    pub fn logit_margin(&self) -> f64 {
        (0..self.len())
            .filter(|&t| !self.protected[t])
            .map(|t| top_gap(&self.direction[t]))
            .fold(f64::INFINITY, f64::min)
    }

    fn attended(&self, data: &Dataset, t: usize, c: f64) -> Result<Vec<f64>> {
        data.example(t).context.tr_mul_vec(&self.coefficients(t, c))
    }

    fn saturated_row(&self, data: &Dataset, t: usize) -> Vec<f64> {
        data.example(t).context.row(self.argmax[t]).to_vec()
    }
}

/// Row elimination `Z'_R = C Z'_I` of dependent rows `R` through independent rows `I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Elimination {
    pub independent: Vec<usize>,
    /// `|R| x |I|`
    pub coefficients: Matrix,
}

impl Elimination {
    /// Offset `-C Z''_I` for a new head block with rows `z(t)`.
    fn offset(&self, d: usize, mut z: impl FnMut(usize) -> Result<Vec<f64>>) -> Result<Matrix> {
        let mut zi = Matrix::zeros(self.independent.len(), d);
        for (i, &t) in self.independent.iter().enumerate() {
            zi.row_mut(i).copy_from_slice(&z(t)?);
        }
        Ok(self.coefficients.matmul(&zi)?.scale(-1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleChoice {
    pub c: f64,
    pub l1_gap: f64,
    pub block_rank: usize,
    /// `(c, worst l1 gap)` for every scale tried.
    pub history: Vec<(f64, f64)>,
    pub delta_bound: Option<f64>,
}

/// Smallest `c` in `1, 2, 4, ...` (up to `c_max`) at which every unprotected
/// example is `delta`-saturated and the eliminated block
/// `target_block - C Z''_I(c)` keeps rank `required_rank`.
pub fn select_saturation_scale(
    path: &SaturationPath,
    data: &Dataset,
    target_block: &Matrix,
    elimination: Option<&Elimination>,
    required_rank: usize,
    cfg: &SynthesisConfig,
) -> Result<ScaleChoice> {
    let d = data.dims().d;
    let block_at = |c: f64| -> Result<Matrix> {
        match elimination {
            Some(e) => target_block.add(&e.offset(d, |t| path.attended(data, t, c))?),
            None => Ok(target_block.clone()),
        }
    };
    let delta_bound = match elimination {
        Some(e) if required_rank > 0 && !e.independent.is_empty() => {
            let limit = target_block.add(&e.offset(d, |t| Ok(path.saturated_row(data, t)))?)?;
            let sigma = singular_values(&limit)?;
            let smin = sigma.get(required_rank - 1).copied().unwrap_or(0.0);
            let e_max = e
                .independent
                .iter()
                .flat_map(|&t| data.example(t).context.row_iter().map(norm2))
                .fold(0.0, f64::max);
            let c_norm = spectral_norm(&e.coefficients)?;
            let denom = libm::sqrt(e.independent.len() as f64) * e_max * c_norm;
            Some(if denom > 0.0 { smin / denom } else { f64::INFINITY })
        }
        _ => None,
    };
    let mut history = Vec::new();
    let mut c = 1.0;
    let mut last = (f64::INFINITY, 0);
    while c <= cfg.c_max {
        let gap = path.max_l1_gap(c);
        history.push((c, gap));
        let block_rank = if required_rank == 0 {
            0
        } else {
            numerical_rank(&block_at(c)?, cfg.tol)?
        };
        last = (gap, block_rank);
        if gap <= cfg.delta && block_rank >= required_rank {
            return Ok(ScaleChoice {
                c,
                l1_gap: gap,
                block_rank,
                history,
                delta_bound,
            });
        }
        c *= 2.0;
    }
    Err(Error::ScaleCapExceeded {
        head: 0,
        c_max: cfg.c_max,
        l1_gap: last.0,
        block_rank: last.1,
        required_rank,
    })
}

/// Normalized positive weights with every entry at least `TARGET_FLOOR`.
fn interior_target<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = raw.iter().sum();
    let mut theta: Vec<f64> = raw.iter().map(|x| (x / sum).max(TARGET_FLOOR)).collect();
    let sum: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|x| *x /= sum);
    theta
}

/// Residual of `v` after projection onto the orthonormal `basis`.
fn residual(basis: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut r = v.to_vec();
    for _ in 0..2 {
        for q in basis {
            axpy(-dot(q, &r), q, &mut r);
        }
    }
    r
}

/// Interior attention targets, one per example, such that the rows
/// `E⁽ᵗ⁾ᵀ theta⁽ᵗ⁾ + offset_t` are linearly independent.
pub fn greedy_row_targets<R: Rng + ?Sized>(
    examples: &[&Example],
    offset: &Matrix,
    cfg: &SynthesisConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let m = examples.len();
    let Some(first) = examples.first() else {
        return Ok(Vec::new());
    };
    let (n, d) = first.context.shape();
    if offset.shape() != (m, d) {
        return Err(dim_err!("offset is {}x{}, expected {m}x{d}", offset.rows(), offset.cols()));
    }
    let limit = if offset.max_abs() == 0.0 { n } else { n - 1 };
    if m > limit {
        return Err(arg_err!("cannot place {m} independent rows (limit {limit})"));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut targets = Vec::with_capacity(m);
    for (i, ex) in examples.iter().enumerate() {
        let mut accepted = false;
        for _ in 0..cfg.retry_budget {
            let theta = interior_target(rng, n);
            let mut row = ex.context.tr_mul_vec(&theta)?;
            axpy(1.0, offset.row(i), &mut row);
            let res = residual(&basis, &row);
            let rn = norm2(&res);
            if rn > cfg.tol.relative_threshold() * norm2(&row) {
                basis.push(res.into_iter().map(|x| x / rn).collect());
                targets.push(theta);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::BudgetExhausted {
                head: 0,
                stage: "greedy targets",
                attempts: cfg.retry_budget,
            });
        }
    }
    Ok(targets)
}

/// Choose `k` independent rows of `z`, taking `priority` rows first and then
/// the largest residual. Returns the chosen rows and the others with their
/// relative residuals in ascending order.
fn partition_rows(z: &Matrix, k: usize, priority: &[usize], tol: f64) -> (Vec<usize>, Vec<(usize, f64)>) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut chosen = Vec::new();
    let push = |t: usize, basis: &mut Vec<Vec<f64>>, chosen: &mut Vec<usize>| -> bool {
        let row = z.row(t);
        let res = residual(basis, row);
        let rn = norm2(&res);
        if rn > tol * norm2(row) && rn > 0.0 {
            basis.push(res.into_iter().map(|x| x / rn).collect());
            chosen.push(t);
            true
        } else {
            false
        }
    };
    for &t in priority {
        if chosen.len() < k {
            push(t, &mut basis, &mut chosen);
        }
    }
    while chosen.len() < k {
        let best = (0..z.rows())
            .filter(|t| !chosen.contains(t))
            .map(|t| (t, rel_residual(&basis, z.row(t))))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((t, r)) if r > 0.0 => {
                if !push(t, &mut basis, &mut chosen) {
                    break;
                }
            }
            _ => break,
        }
    }
    let mut rest: Vec<(usize, f64)> = (0..z.rows())
        .filter(|t| !chosen.contains(t))
        .map(|t| (t, rel_residual(&basis, z.row(t))))
        .collect();
    rest.sort_by(|a, b| a.1.total_cmp(&b.1));
    (chosen, rest)
}

fn rel_residual(basis: &[Vec<f64>], row: &[f64]) -> f64 {
    let n = norm2(row);
    if n == 0.0 {
        0.0
    } else {
        norm2(&residual(basis, row)) / n
    }
}

fn with_head(e: Error, head: usize) -> Error {
    match e {
        Error::ScaleCapExceeded {
            c_max,
            l1_gap,
            block_rank,
            required_rank,
            ..
        } => Error::ScaleCapExceeded {
            head,
            c_max,
            l1_gap,
            block_rank,
            required_rank,
        },
        Error::BudgetExhausted { stage, attempts, .. } => Error::BudgetExhausted { head, stage, attempts },
        other => other,
    }
}

struct HeadPlan {
    w: Matrix,
    assigned: Vec<usize>,
    scale: Option<ScaleChoice>,
    logit_margin: Option<f64>,
    block_rank: usize,
}

/// Interior fit of `base` plus, when the rank budget allows, saturation of
/// everyone else. Falls back to the bare fit if saturation cannot be built.
fn plan_first_head(data: &Dataset, base: &[usize], cfg: &SynthesisConfig, rng: &mut Rng64) -> Result<HeadPlan> {
    let d = data.dims().d;
    let exs: Vec<&Example> = base.iter().map(|&t| data.example(t)).collect();
    let targets = greedy_row_targets(&exs, &Matrix::zeros(base.len(), d), cfg, rng)?;
    let w_star = solve_head_for_targets(&exs, &targets, cfg.model.d_h, cfg.tol)?;
    let block_rank = base.len();
    let mut plan = HeadPlan {
        w: w_star.clone(),
        assigned: base.to_vec(),
        scale: None,
        logit_margin: None,
        block_rank,
    };
    if base.len() < data.len() && base.len() < cfg.model.d_h {
        let saturated = build_w_plus(data, base, cfg.tol, rng, cfg.retry_budget).and_then(|w_plus| {
            let path = SaturationPath::new(&w_star, &w_plus, data, base)?;
            let empty = Matrix::zeros(0, d);
            let choice = select_saturation_scale(&path, data, &empty, None, 0, cfg)?;
            Ok((w_plus, path.logit_margin(), choice))
        });
        if let Ok((w_plus, margin, choice)) = saturated {
            plan.w = w_star.add(&w_plus.scale(choice.c))?;
            plan.logit_margin = Some(margin);
            plan.scale = Some(choice);
        }
    }
    Ok(plan)
}

/// Pure saturation head for when `Z` already has full row rank.
fn plan_saturating_head(data: &Dataset, cfg: &SynthesisConfig, rng: &mut Rng64) -> HeadPlan {
    let d = data.dims().d;
    let zero = Matrix::zeros(d, d);
    let saturated = build_w_plus(data, &[], cfg.tol, rng, cfg.retry_budget).and_then(|w_plus| {
        let path = SaturationPath::new(&zero, &w_plus, data, &[])?;
        let choice = select_saturation_scale(&path, data, &Matrix::zeros(0, d), None, 0, cfg)?;
        Ok((w_plus, path.logit_margin(), choice))
    });
    match saturated {
        Ok((w_plus, margin, choice)) => HeadPlan {
            w: w_plus.scale(choice.c),
            assigned: Vec::new(),
            scale: Some(choice),
            logit_margin: Some(margin),
            block_rank: 0,
        },
        Err(_) => HeadPlan {
            w: zero,
            assigned: Vec::new(),
            scale: None,
            logit_margin: None,
            block_rank: 0,
        },
    }
}

/// Fit `assigned` (rows of `Z'` dependent on `independent`) and saturate
/// everything else.
fn plan_inductive_head(
    data: &Dataset,
    z_prev: &Matrix,
    independent: &[usize],
    assigned: &[usize],
    cfg: &SynthesisConfig,
    rng: &mut Rng64,
) -> Result<HeadPlan> {
    let d = data.dims().d;
    let m = assigned.len();
    let zi = z_prev.select_rows(independent);
    let zr = z_prev.select_rows(assigned);
    let coefficients = least_squares_solve(&zi.transpose(), &zr.transpose(), cfg.tol)?.transpose();
    let elimination = Elimination {
        independent: independent.to_vec(),
        coefficients,
    };
    let w_plus = build_w_plus(data, assigned, cfg.tol, rng, cfg.retry_budget)?;
    let zero = Matrix::zeros(d, d);
    let limit = SaturationPath::new(&zero, &w_plus, data, assigned)?;
    let offset = elimination.offset(d, |t| Ok(limit.saturated_row(data, t)))?;
    let exs: Vec<&Example> = assigned.iter().map(|&t| data.example(t)).collect();
    let targets = greedy_row_targets(&exs, &offset, cfg, rng)?;
    let w_star = solve_head_for_targets(&exs, &targets, cfg.model.d_h, cfg.tol)?;
    let path = SaturationPath::new(&w_star, &w_plus, data, assigned)?;
    let mut target_block = Matrix::zeros(m, d);
    for (i, &t) in assigned.iter().enumerate() {
        target_block.row_mut(i).copy_from_slice(&path.attended(data, t, 0.0)?);
    }
    let choice = select_saturation_scale(&path, data, &target_block, Some(&elimination), m, cfg)?;
    Ok(HeadPlan {
        w: w_star.add(&w_plus.scale(choice.c))?,
        assigned: assigned.to_vec(),
        block_rank: choice.block_rank,
        logit_margin: Some(path.logit_margin()),
        scale: Some(choice),
    })
}

fn check_inputs(data: &Dataset, cfg: &SynthesisConfig) -> Result<()> {
    cfg.validate()?;
    let dims = data.dims();
    let model = &cfg.model;
    if dims.d != model.d || dims.d_out != model.d_out {
        return Err(dim_err!(
            "dataset has d={}, d_out={}; model has d={}, d_out={}",
            dims.d,
            dims.d_out,
            model.d,
            model.d_out
        ));
    }
    let capacity = cfg.capacity(dims.n);
    if dims.t > capacity {
        return Err(Error::CapacityExceeded {
            examples: dims.t,
            capacity,
        });
    }
    if dims.n >= dims.d {
        return Err(Error::AssumptionFailed {
            assumption: "n < d",
            detail: alloc::format!("context length {} is not below width {}", dims.n, dims.d),
        });
    }
    let ctx = check_assumption2(data, cfg.tol)?;
    if !ctx.passed {
        return Err(Error::AssumptionFailed {
            assumption: "Assumption 2 (full-rank contexts)",
            detail: alloc::format!(
                "example {} has context rank {} < {}",
                ctx.first_failing_example.unwrap_or(0),
                ctx.min_rank,
                dims.n
            ),
        });
    }
    let k = cfg.query_kruskal_rank.unwrap_or(dims.n).min(dims.n).min(dims.t);
    let sampling = SamplingParams {
        trials: cfg.assumption_trials,
        pass_fraction: cfg.pass_fraction,
        tol: cfg.tol,
        seed: cfg.seed,
    };
    let probe = Dataset::new(data.examples().to_vec(), None)?;
    let q = if k == dims.n {
        check_assumption1(&probe, &sampling)?
    } else {
        crate::numerics::kruskal_rank_sampled(&probe.queries(), k, sampling.trials, sampling.pass_fraction, cfg.tol, cfg.seed)?
    };
    if !q.passed {
        return Err(Error::AssumptionFailed {
            assumption: "Assumption 1 (query Kruskal rank)",
            detail: alloc::format!("only {:.2}% of {k}-subsets of queries are independent", 100.0 * q.pass_rate),
        });
    }
    Ok(())
}

/// Labels `y - I_{d_out x d} e` that a skip-free layer must produce.
pub fn skip_shifted_labels(data: &Dataset) -> Vec<Vec<f64>> {
    data.examples()
        .iter()
        .map(|ex| ex.label.iter().zip(&ex.query).map(|(y, e)| y - e).collect())
        .collect()
}

/// Weights memorizing every example of `data`. With `cfg.model.skip_connection`
/// the labels are shifted first and verification runs the skip forward pass.
pub fn synthesize(data: &Dataset, cfg: &SynthesisConfig) -> Result<(AttentionWeights, SynthesisReport)> {
    check_inputs(data, cfg)?;
    let target = data;
    let shifted;
    let data = if cfg.model.skip_connection {
        shifted = data.with_labels(skip_shifted_labels(data), None)?;
        &shifted
    } else {
        data
    };
    let dims = data.dims();
    let model = cfg.model;
    let r = cfg.per_head_rank(dims.n);
    let t_total = dims.t;

    let mut weights = AttentionWeights::zeros(&model);
    let mut blocks: Vec<Matrix> = Vec::with_capacity(model.heads);
    let mut assigned_all: Vec<usize> = Vec::new();
    let mut reports = Vec::with_capacity(model.heads);
    let mut rank = 0;

    for h in 0..model.heads {
        let z_prev = if blocks.is_empty() {
            Matrix::zeros(t_total, 0)
        } else {
            Matrix::hstack(&blocks.iter().collect::<Vec<_>>())?
        };
        let (independent, dependent) = if h == 0 {
            (Vec::new(), Vec::new())
        } else {
            partition_rows(&z_prev, rank, &assigned_all, cfg.tol.relative_threshold())
        };
        let assigned: Vec<usize> = if h == 0 {
            (0..r.min(t_total)).collect()
        } else {
            dependent
                .iter()
                .map(|&(t, _)| t)
                .filter(|t| !assigned_all.contains(t))
                .take((r - 1).min(t_total - rank))
                .collect()
        };
        let expected = rank + assigned.len();

        let mut last_err = None;
        let mut accepted = None;
        for attempt in 0..cfg.retry_budget {
            let mut rng = seeded_stream(cfg.seed, ((h as u64) << 32) | attempt as u64);
            let plan = if h == 0 {
                plan_first_head(data, &assigned, cfg, &mut rng)
            } else if assigned.is_empty() {
                Ok(plan_saturating_head(data, cfg, &mut rng))
            } else {
                plan_inductive_head(data, &z_prev, &independent, &assigned, cfg, &mut rng)
            };
            let plan = match plan {
                Ok(p) => p,
                Err(e @ (Error::ScaleCapExceeded { .. } | Error::BudgetExhausted { .. })) => {
                    last_err = Some(with_head(e, h));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (key, query) = match factor_bounded_rank(&plan.w, model.d_h, RankTolerance::new(FACTOR_TOL)?) {
                Ok(f) => f,
                Err(e @ Error::RankExceeded { .. }) => {
                    last_err = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let head = HeadWeights {
                key,
                query,
                value: Matrix::zeros(model.d, model.d_v),
            };
            let block = attended_block(&head, data)?;
            let z = Matrix::hstack(&[&z_prev, &block])?;
            let new_rank = numerical_rank(&z, cfg.tol)?;
            let mut rows = independent.clone();
            rows.extend_from_slice(&assigned);
            if h == 0 {
                rows = assigned.clone();
            }
            let rows_rank = numerical_rank(&z.select_rows(&rows), cfg.tol)?;
            if new_rank < expected || rows_rank < rows.len() {
                last_err = Some(Error::BudgetExhausted {
                    head: h,
                    stage: "rank increase",
                    attempts: cfg.retry_budget,
                });
                continue;
            }
            let product = head.bilinear();
            let wn = plan.w.frobenius_norm();
            let factorization_error = if wn > 0.0 {
                product.sub(&plan.w)?.frobenius_norm() / wn
            } else {
                product.frobenius_norm()
            };
            accepted = Some((plan, head, block, new_rank, attempt + 1, factorization_error));
            break;
        }
        let Some((plan, head, block, new_rank, attempts, factorization_error)) = accepted else {
            return Err(match last_err {
                Some(Error::BudgetExhausted { stage, .. }) => Error::BudgetExhausted {
                    head: h,
                    stage,
                    attempts: cfg.retry_budget,
                },
                Some(e) => e,
                None => Error::BudgetExhausted {
                    head: h,
                    stage: "head construction",
                    attempts: cfg.retry_budget,
                },
            });
        };
        reports.push(HeadReport {
            head: h,
            assigned: plan.assigned.clone(),
            rank_before: rank,
            rank_after: new_rank,
            scale: plan.scale.as_ref().map(|s| s.c),
            saturation_gap: plan.scale.as_ref().map(|s| s.l1_gap),
            logit_margin: plan.logit_margin,
            delta_bound: plan.scale.as_ref().and_then(|s| s.delta_bound),
            block_rank: plan.block_rank,
            attempts,
            factorization_error,
        });
        assigned_all.extend_from_slice(&plan.assigned);
        weights.heads[h] = head;
        blocks.push(block);
        rank = new_rank;
    }

    solve_readout(&mut weights, &model, data)?;
    let final_rank = numerical_rank(&feature_matrix(&weights, &AttentionConfig { skip_connection: false, ..model }, data)?, cfg.tol)?;
    let check = verify_memorization(&weights, &model, target, cfg.verify_tol)?;
    if !check.passed {
        return Err(Error::VerificationFailed {
            max_rel_error: check.max_rel_error,
        });
    }
    Ok((
        weights,
        SynthesisReport {
            r,
            capacity: cfg.capacity(dims.n),
            heads: reports,
            final_rank,
            max_abs_error: check.max_abs_error,
            max_rel_error: check.max_rel_error,
        },
    ))
}

/// `synthesize` for the skip-connection layer.
pub fn synthesize_skip(data: &Dataset, cfg: &SynthesisConfig) -> Result<(AttentionWeights, SynthesisReport)> {
    let mut cfg = *cfg;
    cfg.model.skip_connection = true;
    synthesize(data, &cfg)
}

/// Value weights from `Z W_V = [Y | 0]`, stacked identity output and
/// truncating readout.
fn solve_readout(weights: &mut AttentionWeights, model: &AttentionConfig, data: &Dataset) -> Result<()> {
    let plain = AttentionConfig {
        skip_connection: false,
        ..*model
    };
    let z = feature_matrix(weights, &plain, data)?;
    let labels = data.label_matrix();
    let targets = Matrix::from_fn(data.len(), model.d_v, |t, j| if j < model.d_out { labels[(t, j)] } else { 0.0 });
    let stacked = least_squares_solve(&z, &targets, RankTolerance::new(FACTOR_TOL)?)?;
    for (h, head) in weights.heads.iter_mut().enumerate() {
        let idx: Vec<usize> = (h * model.d..(h + 1) * model.d).collect();
        head.value = stacked.select_rows(&idx);
    }
    let block = Matrix::eye(model.d_v, model.d);
    let blocks: Vec<&Matrix> = (0..model.heads).map(|_| &block).collect();
    weights.output = Matrix::vstack(&blocks)?;
    weights.readout = Matrix::eye(model.d, model.d_out);
    Ok(())
}

/// Worst per-example error of the layer against the labels. The relative
/// error is `|y_hat - y| / |y|`, or the absolute error when `y = 0`.
pub fn verify_memorization(
    w: &AttentionWeights,
    cfg: &AttentionConfig,
    data: &Dataset,
    tol: f64,
) -> Result<Verification> {
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut finite = true;
    for ex in data.examples() {
        let y_hat = forward(w, cfg, &ex.context, &ex.query)?.prediction;
        if y_hat.len() != ex.label.len() {
            return Err(dim_err!("prediction width {} vs label width {}", y_hat.len(), ex.label.len()));
        }
        let diff: Vec<f64> = y_hat.iter().zip(&ex.label).map(|(a, b)| a - b).collect();
        let abs = norm2(&diff);
        let yn = norm2(&ex.label);
        let rel = if yn > 0.0 { abs / yn } else { abs };
        finite &= rel.is_finite();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    if !finite {
        max_abs = f64::INFINITY;
        max_rel = f64::INFINITY;
    }
    Ok(Verification {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        passed: finite && (max_rel <= tol || tol == f64::INFINITY),
    })
}
