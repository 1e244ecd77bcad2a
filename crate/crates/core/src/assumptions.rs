//! Data-assumption checks, following the sampled Kruskal-rank protocol:
//! draw `k` distinct vectors, test for full rank, repeat, and accept when at
//! least `pass_fraction` of the draws pass.
//!
//! * Assumption 1: the query vectors have Kruskal rank at least `n`.
//! * Assumption 2: every context matrix has rank `n`.
//! * Assumption 3: the mixed queries `e + mean(E)` have Kruskal rank at least `n`.
//! * General position: Kruskal rank `d`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::numerics::{axpy, kruskal_rank_sampled, numerical_rank, KruskalTest, RankTolerance};

/// Sampling protocol shared by all Kruskal-type checks.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplingParams {
    pub trials: usize,
    pub pass_fraction: f64,
    pub tol: RankTolerance,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            trials: 5000,
            pass_fraction: 0.99,
            tol: RankTolerance::default(),
            seed: 0,
        }
    }
}

/// Result of the per-example context rank check.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ContextRankCheck {
    pub passed: bool,
    pub first_failing_example: Option<usize>,
    pub min_rank: usize,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AssumptionReport {
    pub assumption1: KruskalTest,
    pub assumption2: ContextRankCheck,
    pub assumption3: KruskalTest,
    pub general_position: KruskalTest,
    pub measured_kruskal_lower_bound: usize,
}

impl AssumptionReport {
    /// Assumptions 1 and 2, the preconditions of the memorization construction.
    pub fn construction_ready(&self) -> bool {
        self.assumption1.passed && self.assumption2.passed
    }
}

fn failed_test() -> KruskalTest {
    KruskalTest {
        passed: false,
        pass_rate: 0.0,
        trials: 0,
        exhaustive: false,
    }
}

pub fn check_assumption1(data: &Dataset, p: &SamplingParams) -> Result<KruskalTest> {
    let n = data.dims().n;
    kruskal_rank_sampled(&data.queries(), n, p.trials, p.pass_fraction, p.tol, p.seed)
}

pub fn check_assumption2(data: &Dataset, tol: RankTolerance) -> Result<ContextRankCheck> {
    let dims = data.dims();
    if dims.n > dims.d {
        return Ok(ContextRankCheck {
            passed: false,
            first_failing_example: Some(0),
            min_rank: dims.d.min(dims.n),
            diagnostic: Some(alloc::format!(
                "context length n={} exceeds width d={}; rank n is impossible",
                dims.n,
                dims.d
            )),
        });
    }
    let mut first = None;
    let mut min_rank = dims.n;
    for (t, ex) in data.examples().iter().enumerate() {
        let r = numerical_rank(&ex.context, tol)?;
        min_rank = min_rank.min(r);
        if r < dims.n && first.is_none() {
            first = Some(t);
        }
    }
    Ok(ContextRankCheck {
        passed: first.is_none(),
        first_failing_example: first,
        min_rank,
        diagnostic: first.map(|t| alloc::format!("context {t} is rank deficient")),
    })
}

/// Queries shifted by the mean of their own context.
pub fn mixed_queries(data: &Dataset) -> Vec<Vec<f64>> {
    data.examples()
        .iter()
        .map(|ex| {
            let mut q = ex.query.clone();
            axpy(1.0, &ex.context.row_mean(), &mut q);
            q
        })
        .collect()
}

pub fn check_assumption3(data: &Dataset, p: &SamplingParams) -> Result<KruskalTest> {
    let n = data.dims().n;
    kruskal_rank_sampled(&mixed_queries(data), n, p.trials, p.pass_fraction, p.tol, p.seed)
}

pub fn check_general_position<V: AsRef<[f64]>>(vectors: &[V], p: &SamplingParams) -> Result<KruskalTest> {
    let d = vectors.first().map_or(0, |v| v.as_ref().len());
    kruskal_rank_sampled(vectors, d, p.trials, p.pass_fraction, p.tol, p.seed)
}

/// Largest `k <= k_max` whose sampled test passes, scanning upward and
/// stopping at the first failure.
pub fn kruskal_lower_bound_scan<V: AsRef<[f64]>>(vectors: &[V], k_max: usize, p: &SamplingParams) -> Result<usize> {
    let mut best = 0;
    for k in 1..=k_max {
        let t = kruskal_rank_sampled(vectors, k, p.trials, p.pass_fraction, p.tol, p.seed.wrapping_add(k as u64))?;
        if !t.passed {
            break;
        }
        best = k;
    }
    Ok(best)
}

fn soft(r: Result<KruskalTest>) -> Result<KruskalTest> {
    match r {
        Err(Error::TooFewVectors { .. }) | Err(Error::InvalidArgument(_)) => Ok(failed_test()),
        other => other,
    }
}

/// Run every check on a dataset. Checks whose size precondition cannot be met
/// (too few vectors, `k > d`) are reported as failed instead of erroring.
pub fn check_all(data: &Dataset, p: &SamplingParams) -> Result<AssumptionReport> {
    let dims = data.dims();
    let queries = data.queries();
    Ok(AssumptionReport {
        assumption1: soft(check_assumption1(data, p))?,
        assumption2: check_assumption2(data, p.tol)?,
        assumption3: soft(check_assumption3(data, p))?,
        general_position: soft(check_general_position(&queries, p))?,
        measured_kruskal_lower_bound: kruskal_lower_bound_scan(&queries, dims.d.min(dims.t), p)?,
    })
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;
    use crate::model::{mixing_layer, sinusoidal_positional_encoding, Example};
    use crate::numerics::Matrix;
    use crate::oracle::brute_force_kruskal;
    use crate::random::{gaussian_matrix, seeded, uniform_matrix, uniform_vec};

    fn params(trials: usize) -> SamplingParams {
        SamplingParams {
            trials,
            ..Default::default()
        }
    }

    fn dataset(queries: Vec<Vec<f64>>, contexts: Vec<Matrix>) -> Dataset {
        let ex = queries
            .into_iter()
            .zip(contexts)
            .map(|(query, context)| Example {
                context,
                query,
                label: vec![0.0],
            })
            .collect();
        Dataset::new(ex, None).unwrap()
    }

    fn random_contexts(seed: u64, t: usize, n: usize, d: usize) -> Vec<Matrix> {
        let mut rng = seeded(seed);
        (0..t).map(|_| uniform_matrix(&mut rng, n, d)).collect()
    }

    #[test]
    fn assumption1_identity_queries_pass() {
        let d = 6;
        let queries: Vec<Vec<f64>> = (0..d).map(|i| Matrix::identity(d).row(i).to_vec()).collect();
        let data = dataset(queries, random_contexts(1, d, 3, d));
        assert!(check_assumption1(&data, &params(100)).unwrap().passed);
    }

    #[test]
    fn assumption1_identical_queries_fail() {
        let q = vec![0.3, 0.1, 0.7, 0.2];
        let data = dataset(vec![q; 6], random_contexts(2, 6, 2, 4));
        let t = check_assumption1(&data, &params(100)).unwrap();
        assert!(!t.passed);
        assert_eq!(t.pass_rate, 0.0);
    }

    #[test]
    fn assumption1_uniform_queries_pass() {
        let mut rng = seeded(3);
        let queries: Vec<Vec<f64>> = (0..40).map(|_| uniform_vec(&mut rng, 12)).collect();
        let data = dataset(queries, random_contexts(4, 40, 5, 12));
        let t = check_assumption1(&data, &params(500)).unwrap();
        assert!(!t.exhaustive);
        assert_eq!(t.pass_rate, 1.0);
    }

    #[test]
    fn assumption1_needs_t_at_least_n() {
        let data = dataset(vec![vec![1.0, 0.0, 0.0]; 2], random_contexts(5, 2, 3, 3));
        assert!(matches!(
            check_assumption1(&data, &params(10)),
            Err(Error::TooFewVectors { have: 2, need: 3 })
        ));
    }

    #[test]
    fn assumption2_with_positional_encoding_passes() {
        let (n, d) = (8, 16);
        let pe = sinusoidal_positional_encoding(n + 1, d).unwrap();
        let pos = Matrix::from_fn(n, d, |i, j| pe[(i + 1, j)]);
        let ctx: Vec<Matrix> = random_contexts(6, 10, n, d).iter().map(|c| c.add(&pos).unwrap()).collect();
        let data = dataset(vec![vec![0.0; d]; 10], ctx);
        let c = check_assumption2(&data, RankTolerance::default()).unwrap();
        assert!(c.passed);
        assert_eq!(c.min_rank, n);
    }

    #[test]
    fn assumption2_duplicated_row_fails() {
        let mut ctx = random_contexts(7, 4, 3, 5);
        let row = ctx[2].row(0).to_vec();
        ctx[2].row_mut(1).copy_from_slice(&row);
        let data = dataset(vec![vec![0.0; 5]; 4], ctx);
        let c = check_assumption2(&data, RankTolerance::default()).unwrap();
        assert!(!c.passed);
        assert_eq!(c.first_failing_example, Some(2));
        assert_eq!(c.min_rank, 2);
    }

    #[test]
    fn assumption2_orthonormal_square_passes() {
        let q = crate::numerics::orthogonal_complement_basis(&Matrix::zeros(0, 4), RankTolerance::default()).unwrap();
        let data = dataset(vec![vec![0.0; 4]], vec![q]);
        assert!(check_assumption2(&data, RankTolerance::default()).unwrap().passed);
    }

    #[test]
    fn assumption2_n_above_d_fails_with_diagnostic() {
        let data = dataset(vec![vec![0.0; 2]], random_contexts(8, 1, 3, 2));
        let c = check_assumption2(&data, RankTolerance::default()).unwrap();
        assert!(!c.passed);
        assert!(c.diagnostic.is_some());
    }

    #[test]
    fn assumption3_mixing_separates_identical_queries() {
        let q = vec![0.5; 10];
        let data = dataset(vec![q; 30], random_contexts(9, 30, 4, 10));
        assert!(!check_assumption1(&data, &params(300)).unwrap().passed);
        let t = check_assumption3(&data, &params(300)).unwrap();
        assert!(t.passed);
        // Oracle: the mixed set itself has full rank 4-subsets by direct rank check.
        let mixed = Matrix::from_rows(&mixed_queries(&data)).unwrap();
        assert_eq!(numerical_rank(&mixed, RankTolerance::default()).unwrap(), 10);
    }

    #[test]
    fn assumption3_identical_everything_fails() {
        let ctx = random_contexts(10, 1, 3, 6).remove(0);
        let data = dataset(vec![vec![0.1; 6]; 8], vec![ctx; 8]);
        assert!(!check_assumption3(&data, &params(50)).unwrap().passed);
    }

    #[test]
    fn assumption3_with_zero_contexts_equals_assumption1() {
        let mut rng = seeded(11);
        let queries: Vec<Vec<f64>> = (0..12).map(|_| uniform_vec(&mut rng, 5)).collect();
        let data = dataset(queries, vec![Matrix::zeros(3, 5); 12]);
        let p = params(200);
        assert_eq!(check_assumption3(&data, &p).unwrap(), check_assumption1(&data, &p).unwrap());
    }

    #[test]
    fn assumption3_on_mixed_data_equals_assumption1() {
        let data = dataset(vec![vec![0.2; 8]; 25], random_contexts(12, 25, 3, 8));
        let mixed = mixing_layer(&data);
        let p = params(300);
        let via3 = check_assumption3(&data, &p).unwrap();
        let via1 = check_assumption1(&mixed, &p).unwrap();
        assert_eq!(via3, via1);
    }

    #[test]
    fn general_position_random_vs_hyperplane() {
        let mut rng = seeded(13);
        let d = 5;
        let v: Vec<Vec<f64>> = (0..d).map(|_| uniform_vec(&mut rng, d)).collect();
        assert!(check_general_position(&v, &params(10)).unwrap().passed);

        // Last coordinate forced to zero: a (d-1)-dimensional subspace.
        let flat: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                let mut x = uniform_vec(&mut rng, d);
                x[d - 1] = 0.0;
                x
            })
            .collect();
        assert!(!check_general_position(&flat, &params(10)).unwrap().passed);
        assert!(check_general_position(&flat[..3], &params(10)).is_err());
    }

    #[test]
    fn general_position_with_constant_sum_tokens() {
        // Entries summing to C != 0 lie on an affine hyperplane, which does not
        // pass through the origin, so d such vectors are still independent.
        let mut rng = seeded(14);
        let d = 6;
        let c = 3.0;
        let v: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let mut x = uniform_vec(&mut rng, d);
                let shift = (c - x.iter().sum::<f64>()) / d as f64;
                x.iter_mut().for_each(|xi| *xi += shift);
                x
            })
            .collect();
        let m = Matrix::from_rows(&v).unwrap();
        assert_eq!(numerical_rank(&m, RankTolerance::default()).unwrap(), d);
        assert!(check_general_position(&v, &params(100)).unwrap().passed);
        // Differences of such tokens sum to zero and cannot be in general position.
        let diffs: Vec<Vec<f64>> = (1..10).map(|i| v[i].iter().zip(&v[0]).map(|(a, b)| a - b).collect()).collect();
        assert!(!check_general_position(&diffs, &params(100)).unwrap().passed);
    }

    #[test]
    fn scan_orthonormal_and_four_vectors() {
        let d = 4;
        let v: Vec<Vec<f64>> = (0..d).map(|i| Matrix::identity(d).row(i).to_vec()).collect();
        assert_eq!(kruskal_lower_bound_scan(&v, d, &params(10)).unwrap(), d);

        let four = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        assert_eq!(brute_force_kruskal(&four, 1e-12), 2);
        assert_eq!(kruskal_lower_bound_scan(&four, 3, &params(10)).unwrap(), 2);
    }

    #[test]
    fn scan_finds_projection_rank() {
        let mut rng = seeded(15);
        let q = 3;
        let basis = gaussian_matrix(&mut rng, q, 8, 1.0);
        let coeffs = gaussian_matrix(&mut rng, 30, q, 1.0);
        let m = coeffs.matmul(&basis).unwrap();
        let v: Vec<Vec<f64>> = m.row_iter().map(|r| r.to_vec()).collect();
        assert_eq!(kruskal_lower_bound_scan(&v, 8, &params(400)).unwrap(), q);
    }

    #[test]
    fn scan_is_monotone_on_small_instances() {
        for seed in 0..20 {
            let mut rng = seeded(100 + seed);
            let mut v: Vec<Vec<f64>> = (0..7).map(|_| uniform_vec(&mut rng, 4)).collect();
            let dup = v[0].iter().zip(&v[1]).map(|(a, b)| a + b).collect();
            v[6] = dup;
            let p = SamplingParams {
                pass_fraction: 1.0,
                ..params(10)
            };
            let best = kruskal_lower_bound_scan(&v, 4, &p).unwrap();
            assert_eq!(best, brute_force_kruskal(&v, 1e-9));
            for k in 1..=best {
                assert!(kruskal_rank_sampled(&v, k, 10, 1.0, p.tol, 0).unwrap().passed);
            }
        }
    }

    #[test]
    fn sampled_kruskal_never_exceeds_rank() {
        let mut rng = seeded(16);
        let m = gaussian_matrix(&mut rng, 12, 3, 1.0)
            .matmul(&gaussian_matrix(&mut rng, 3, 6, 1.0))
            .unwrap();
        let v: Vec<Vec<f64>> = m.row_iter().map(|r| r.to_vec()).collect();
        let k = kruskal_lower_bound_scan(&v, 6, &params(100)).unwrap();
        assert!(k <= numerical_rank(&m, RankTolerance::default()).unwrap());
    }

    #[test]
    fn report_on_generic_data() {
        let mut rng = seeded(17);
        let queries: Vec<Vec<f64>> = (0..20).map(|_| uniform_vec(&mut rng, 6)).collect();
        let data = dataset(queries, random_contexts(18, 20, 3, 6));
        let r = check_all(&data, &params(200)).unwrap();
        assert!(r.construction_ready());
        assert!(r.assumption3.passed);
        assert!(r.general_position.passed);
        assert_eq!(r.measured_kruskal_lower_bound, 6);
    }
}
