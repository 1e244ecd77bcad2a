//! Brute-force reference computations used only by the unit tests.

use alloc::vec::Vec;

use crate::numerics::Matrix;

/// Rank by Gaussian elimination with partial pivoting; a pivot counts when its
/// magnitude exceeds `eps` times the largest entry of the input.
pub fn elimination_rank(m: &Matrix, eps: f64) -> usize {
    let mut a: Vec<Vec<f64>> = m.row_iter().map(|r| r.to_vec()).collect();
    let scale = m.max_abs();
    if scale == 0.0 {
        return 0;
    }
    let (rows, cols) = m.shape();
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let (piv, val) = (rank..rows)
            .map(|i| (i, a[i][col].abs()))
            .fold((rank, -1.0), |best, x| if x.1 > best.1 { x } else { best });
        if val <= eps * scale {
            continue;
        }
        a.swap(rank, piv);
        for i in rank + 1..rows {
            let f = a[i][col] / a[rank][col];
            for j in col..cols {
                a[i][j] -= f * a[rank][j];
            }
        }
        rank += 1;
    }
    rank
}

/// Exact Kruskal rank by enumerating every subset.
pub fn brute_force_kruskal(vectors: &[Vec<f64>], eps: f64) -> usize {
    let n = vectors.len();
    let d = vectors.first().map_or(0, |v| v.len());
    let mut best = 0;
    for k in 1..=n.min(d) {
        let all = (0u32..(1u32 << n))
            .filter(|mask| mask.count_ones() as usize == k)
            .all(|mask| {
                let rows: Vec<&[f64]> = (0..n)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| vectors[i].as_slice())
                    .collect();
                elimination_rank(&Matrix::from_rows(&rows).unwrap(), eps) == k
            });
        if all {
            best = k;
        } else {
            break;
        }
    }
    best
}

/// Fraction of size-`k` subsets with full rank, by enumeration.
pub fn brute_force_pass_rate(vectors: &[Vec<f64>], k: usize, eps: f64) -> f64 {
    let n = vectors.len();
    let (mut good, mut total) = (0, 0);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        total += 1;
        let rows: Vec<&[f64]> = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| vectors[i].as_slice())
            .collect();
        if elimination_rank(&Matrix::from_rows(&rows).unwrap(), eps) == k {
            good += 1;
        }
    }
    good as f64 / total as f64
}
