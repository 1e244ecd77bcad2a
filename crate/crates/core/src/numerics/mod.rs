//! Tolerance-aware dense linear algebra.
//!
//! Every rank decision in the crate goes through [`numerical_rank`]: a singular
//! value counts when it exceeds `relative_threshold * sigma_max`. Pseudo-inverses
//! and least-squares solves use the same cutoff, so a matrix that is reported to
//! have full row rank is also inverted on exactly that support.

mod kruskal;
mod matrix;

use alloc::vec::Vec;

pub use kruskal::{binomial, kruskal_rank_exhaustive, kruskal_rank_sampled, KruskalTest, EXHAUSTIVE_LIMIT};
pub use matrix::{axpy, dot, norm2, Matrix};

use crate::error::{dim_err, Error, Result};

/// Relative singular-value cutoff used for rank decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RankTolerance {
    relative_threshold: f64,
}

impl RankTolerance {
    pub const DEFAULT_THRESHOLD: f64 = 1e-8;

    pub fn new(relative_threshold: f64) -> Result<Self> {
        if !(relative_threshold > 0.0 && relative_threshold < 1.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "rank tolerance must lie in (0, 1), got {relative_threshold}"
            )));
        }
        Ok(Self { relative_threshold })
    }

    #[inline]
    pub fn relative_threshold(&self) -> f64 {
        self.relative_threshold
    }

    /// Absolute cutoff for a spectrum whose largest value is `sigma_max`.
    #[inline]
    pub fn cutoff(&self, sigma_max: f64) -> f64 {
        self.relative_threshold * sigma_max
    }
}

impl Default for RankTolerance {
    fn default() -> Self {
        Self {
            relative_threshold: Self::DEFAULT_THRESHOLD,
        }
    }
}

/// Thin singular value decomposition `M = U diag(s) Vᵀ` with `s` descending.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows x k`
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    /// `k x cols`
    pub vt: Matrix,
}

impl Svd {
    pub fn rank(&self, tol: RankTolerance) -> usize {
        let smax = self.singular_values.first().copied().unwrap_or(0.0);
        let cut = tol.cutoff(smax);
        self.singular_values.iter().filter(|&&s| s > cut).count()
    }
}

pub fn svd(m: &Matrix) -> Result<Svd> {
    m.ensure_finite()?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Svd {
            u: Matrix::zeros(rows, 0),
            singular_values: Vec::new(),
            vt: Matrix::zeros(0, cols),
        });
    }
    let dec = m
        .to_faer()
        .thin_svd()
        .map_err(|e| Error::InvalidArgument(alloc::format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (dec.U(), dec.S(), dec.V());
    let k = s.dim();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    Ok(Svd {
        u: Matrix::from_fn(rows, k, |i, j| u[(i, order[j])]),
        singular_values: order.iter().map(|&j| s[j]).collect(),
        vt: Matrix::from_fn(k, cols, |i, j| v[(j, order[i])]),
    })
}

pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(m)?.singular_values)
}

/// Largest singular value; 0 for empty matrices.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

/// Number of singular values above `tol * sigma_max`.
pub fn numerical_rank(m: &Matrix, tol: RankTolerance) -> Result<usize> {
    Ok(svd(m)?.rank(tol))
}

/// Moore–Penrose pseudo-inverse truncated at `tol`.
pub fn pseudo_inverse(m: &Matrix, tol: RankTolerance) -> Result<Matrix> {
    let dec = svd(m)?;
    let r = dec.rank(tol);
    let (rows, cols) = m.shape();
    // pinv = V_r diag(1/s) U_rᵀ
    Ok(Matrix::from_fn(cols, rows, |i, j| {
        (0..r)
            .map(|k| dec.vt[(k, i)] * dec.u[(j, k)] / dec.singular_values[k])
            .sum()
    }))
}

/// Minimum-norm minimiser of `‖A X − B‖_F`, computed through the SVD of `A`.
pub fn least_squares_solve(a: &Matrix, b: &Matrix, tol: RankTolerance) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(dim_err!(
            "least squares: A has {} rows but B has {}",
            a.rows(),
            b.rows()
        ));
    }
    b.ensure_finite()?;
    let dec = svd(a)?;
    let r = dec.rank(tol);
    // X = V_r diag(1/s) U_rᵀ B
    let mut coeff = Matrix::zeros(r, b.cols());
    for k in 0..r {
        let inv = 1.0 / dec.singular_values[k];
        let row = coeff.row_mut(k);
        for i in 0..a.rows() {
            let uik = dec.u[(i, k)] * inv;
            if uik != 0.0 {
                axpy(uik, b.row(i), row);
            }
        }
    }
    let mut x = Matrix::zeros(a.cols(), b.cols());
    for k in 0..r {
        for i in 0..a.cols() {
            let v = dec.vt[(k, i)];
            axpy(v, coeff.row(k), x.row_mut(i));
        }
    }
    Ok(x)
}

/// Orthonormal rows spanning the orthogonal complement of the row space of `v`.
///
/// Returns a `(d - rank(v)) x d` matrix.
pub fn orthogonal_complement_basis(v: &Matrix, tol: RankTolerance) -> Result<Matrix> {
    let d = v.cols();
    // Zero-padding to at least d rows makes the thin SVD return a full d x d Vᵀ.
    let padded = if v.rows() < d {
        Matrix::vstack(&[v, &Matrix::zeros(d - v.rows(), d)])?
    } else {
        v.clone()
    };
    let dec = svd(&padded)?;
    let r = dec.rank(tol);
    let idx: Vec<usize> = (r..d).collect();
    Ok(dec.vt.select_rows(&idx))
}

/// Factor a `d x d` matrix of rank at most `d_h` as `W_K W_Qᵀ` with both
/// factors `d x d_h` (`W_K = U√Σ`, `W_Q = V√Σ`, zero-padded columns).
pub fn factor_bounded_rank(w: &Matrix, d_h: usize, tol: RankTolerance) -> Result<(Matrix, Matrix)> {
    if w.rows() != w.cols() {
        return Err(dim_err!("expected a square matrix, got {}x{}", w.rows(), w.cols()));
    }
    let d = w.rows();
    let dec = svd(w)?;
    let rank = dec.rank(tol);
    if rank > d_h {
        return Err(Error::RankExceeded { rank, budget: d_h });
    }
    let mut wk = Matrix::zeros(d, d_h);
    let mut wq = Matrix::zeros(d, d_h);
    for k in 0..rank {
        let root = libm::sqrt(dec.singular_values[k]);
        for i in 0..d {
            wk[(i, k)] = dec.u[(i, k)] * root;
            wq[(i, k)] = dec.vt[(k, i)] * root;
        }
    }
    Ok((wk, wq))
}
