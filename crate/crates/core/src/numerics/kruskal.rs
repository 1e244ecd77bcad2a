use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{numerical_rank, Matrix, RankTolerance};
use crate::error::{arg_err, dim_err, Error, Result};

/// Subset counts at or below this are enumerated instead of sampled.
pub const EXHAUSTIVE_LIMIT: u64 = 20_000;

/// Outcome of a (sampled or exhaustive) Kruskal-rank test at a fixed `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KruskalTest {
    pub passed: bool,
    pub pass_rate: f64,
    /// Number of subsets examined.
    pub trials: usize,
    pub exhaustive: bool,
}

/// `C(n, k)`, saturating at `u64::MAX`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

fn subset_independent<V: AsRef<[f64]>>(vectors: &[V], idx: &[usize], tol: RankTolerance) -> Result<bool> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| vectors[i].as_ref()).collect();
    let m = Matrix::from_rows(&rows)?;
    Ok(numerical_rank(&m, tol)? == idx.len())
}

fn validate<V: AsRef<[f64]>>(vectors: &[V], k: usize) -> Result<usize> {
    if vectors.len() < k {
        return Err(Error::TooFewVectors {
            have: vectors.len(),
            need: k,
        });
    }
    let d = vectors.first().map_or(0, |v| v.as_ref().len());
    if vectors.iter().any(|v| v.as_ref().len() != d) {
        return Err(dim_err!("vectors have differing lengths"));
    }
    if k > d {
        return Err(arg_err!("subset size {k} exceeds the dimension {d}"));
    }
    Ok(d)
}

/// Advance `idx` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Fraction of all size-`k` subsets that are linearly independent.
pub fn kruskal_rank_exhaustive<V: AsRef<[f64]>>(
    vectors: &[V],
    k: usize,
    pass_fraction: f64,
    tol: RankTolerance,
) -> Result<KruskalTest> {
    validate(vectors, k)?;
    if k == 0 {
        return Ok(KruskalTest {
            passed: true,
            pass_rate: 1.0,
            trials: 1,
            exhaustive: true,
        });
    }
    let n = vectors.len();
    let mut idx: Vec<usize> = (0..k).collect();
    let (mut total, mut good) = (0usize, 0usize);
    loop {
        total += 1;
        if subset_independent(vectors, &idx, tol)? {
            good += 1;
        }
        if !next_combination(&mut idx, n) {
            break;
        }
    }
    let pass_rate = good as f64 / total as f64;
    Ok(KruskalTest {
        passed: pass_rate >= pass_fraction,
        pass_rate,
        trials: total,
        exhaustive: true,
    })
}

/// Randomised Kruskal-rank test: draw `trials` subsets of `k` distinct vectors
/// and check that each has full rank. Falls back to full enumeration when
/// `C(len, k) <= EXHAUSTIVE_LIMIT`.
///
/// Trial `i` draws from its own ChaCha stream, so the outcome depends only on
/// `seed` and not on evaluation order.
pub fn kruskal_rank_sampled<V: AsRef<[f64]>>(
    vectors: &[V],
    k: usize,
    trials: usize,
    pass_fraction: f64,
    tol: RankTolerance,
    seed: u64,
) -> Result<KruskalTest> {
    validate(vectors, k)?;
    if trials == 0 {
        return Err(arg_err!("trials must be at least 1"));
    }
    if binomial(vectors.len(), k) <= EXHAUSTIVE_LIMIT {
        return kruskal_rank_exhaustive(vectors, k, pass_fraction, tol);
    }
    let mut good = 0usize;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let idx = rand::seq::index::sample(&mut rng, vectors.len(), k).into_vec();
        if subset_independent(vectors, &idx, tol)? {
            good += 1;
        }
    }
    let pass_rate = good as f64 / trials as f64;
    Ok(KruskalTest {
        passed: pass_rate >= pass_fraction,
        pass_rate,
        trials,
        exhaustive: false,
    })
}
