//! Dense `f64` kernels: thin SVD, polar orthonormalization, jittered SPD solve.

use nalgebra::{Cholesky, DMatrix};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

/// Singular values below this are treated as zero by the polar factor.
pub const RANK_TOL: f64 = 1e-12;
/// Jitter grows by this factor after each failed factorization.
pub const JITTER_GROWTH: f64 = 10.0;
pub const MAX_JITTER_ESCALATIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix contains non-finite values")]
    NonFinite,
    #[error("requested rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("cannot orthonormalize {cols} columns in dimension {rows}")]
    TooManyColumns { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("SVD did not converge")]
    SvdNoConvergence,
    #[error("SPD factorization failed after escalating jitter to {last_jitter:e}")]
    FactorizationFailed { last_jitter: f64 },
}

/// Top-`r` singular triples, `sigma` descending.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

fn check_finite(m: &Matrix) -> Result<(), LinalgError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

/// Thin SVD (`U` is `rows x min`, `V` is `cols x min`) with singular values
/// descending and no sign normalization.
fn sorted_svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix), LinalgError> {
    let (rows, cols) = m.shape();
    let n = rows.min(cols);
    if n == 0 {
        return Ok((Matrix::zeros(rows, 0), Vec::new(), Matrix::zeros(cols, 0)));
    }
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let svd = fm.thin_svd().map_err(|_| LinalgError::SvdNoConvergence)?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    Ok((
        Matrix::from_fn(rows, n, |i, j| u[(i, j)]),
        (0..n).map(|i| s[i].max(0.0)).collect(),
        Matrix::from_fn(cols, n, |i, j| v[(i, j)]),
    ))
}

/// Top-`r` singular triples of `m`.
///
/// Each column of `U` is oriented so that its largest-magnitude entry is
/// positive (the matching column of `V` flips with it).
pub fn thin_svd(m: &Matrix, r: usize) -> Result<ThinSvd, LinalgError> {
    check_finite(m)?;
    let max = m.nrows().min(m.ncols());
    if r == 0 || r > max {
        return Err(LinalgError::RankOutOfRange { rank: r, max });
    }
    let (u, sigma, v) = sorted_svd(m)?;
    let mut u = u.columns(0, r).into_owned();
    let mut v = v.columns(0, r).into_owned();
    for j in 0..r {
        let mut best = 0;
        for i in 1..u.nrows() {
            if u[(i, j)].abs() > u[(best, j)].abs() {
                best = i;
            }
        }
        if u[(best, j)] < 0.0 {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
    Ok(ThinSvd {
        u,
        sigma: sigma[..r].to_vec(),
        v,
    })
}

/// Nearest column-orthonormal matrix to `a` (its orthonormal polar factor).
///
/// With `a = P S R^T`, returns `P R^T`. Columns of `P` paired with
/// singular values below [`RANK_TOL`] are re-orthonormalized against the
/// rest so `Q^T Q = I` holds for rank-deficient input too.
pub fn procrustes_orthonormalize(a: &Matrix) -> Result<Matrix, LinalgError> {
    check_finite(a)?;
    let (d, q) = a.shape();
    if q > d {
        return Err(LinalgError::TooManyColumns { rows: d, cols: q });
    }
    if q == 0 {
        return Ok(Matrix::zeros(d, 0));
    }
    let (mut p, sigma, r) = sorted_svd(a)?;
    let scale = sigma.first().copied().unwrap_or(0.0).max(1.0);
    let deficient: Vec<usize> = (0..q).filter(|&j| sigma[j] < RANK_TOL * scale).collect();
    if !deficient.is_empty() {
        complete_orthonormal(&mut p, &deficient);
    }
    Ok(p * r.transpose())
}

/// Replaces the listed columns of `p` with unit vectors orthogonal to every other column.
fn complete_orthonormal(p: &mut Matrix, replace: &[usize]) {
    let d = p.nrows();
    let mut fixed: Vec<usize> = (0..p.ncols()).filter(|j| !replace.contains(j)).collect();
    let mut candidate = 0usize;
    for &j in replace {
        let mut seeds: Vec<Vector> = vec![p.column(j).into_owned()];
        let mut placed = false;
        while !placed {
            let mut x = match seeds.pop() {
                Some(s) => s,
                None => {
                    let mut e = Vector::zeros(d);
                    e[candidate % d] = 1.0;
                    candidate += 1;
                    e
                }
            };
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for &f in &fixed {
                    let c = p.column(f).dot(&x);
                    x.axpy(-c, &p.column(f), 1.0);
                }
            }
            let n = x.norm();
            if n > 1e-6 {
                p.set_column(j, &(x / n));
                fixed.push(j);
                placed = true;
            }
            assert!(candidate <= 2 * d, "orthonormal completion exhausted candidates");
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpdSolution {
    pub x: Matrix,
    /// Jitter actually added to the diagonal.
    pub jitter: f64,
    /// `||(A + jitter I) X - B||_F`.
    pub residual: f64,
}

pub fn max_asymmetry(a: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Solves `(A + eps I) X = B` by Cholesky.
///
/// If the factorization fails (or its residual misses the accuracy target)
/// the jitter is multiplied by [`JITTER_GROWTH`] up to
/// [`MAX_JITTER_ESCALATIONS`] times. A zero `eps` escalates from
/// `1e-12 * max(1, max_i |A_ii|)`.
pub fn spd_solve(a: &Matrix, b: &Matrix, eps: f64) -> Result<SpdSolution, LinalgError> {
    let p = a.nrows();
    if a.ncols() != p || b.nrows() != p {
        return Err(LinalgError::Dimension(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    check_finite(a)?;
    check_finite(b)?;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(LinalgError::Dimension(format!("invalid jitter {eps}")));
    }
    let amax = a.amax();
    let asym = max_asymmetry(a);
    if asym > 1e-10 * amax.max(f64::MIN_POSITIVE) {
        return Err(LinalgError::NotSymmetric(asym));
    }
    let diag_scale = (0..p).map(|i| a[(i, i)].abs()).fold(1.0f64, f64::max);
    let a_norm = a.norm();
    let b_norm = b.norm();

    let mut jitter = eps;
    for attempt in 0..=MAX_JITTER_ESCALATIONS {
        if attempt > 0 {
            jitter = if jitter > 0.0 {
                jitter * JITTER_GROWTH
            } else {
                1e-12 * diag_scale
            };
        }
        let mut shifted = a.clone();
        for i in 0..p {
            shifted[(i, i)] += jitter;
        }
        let x = if is_diagonal(&shifted) {
            // Direct division: one rounding per entry.
            if (0..p).any(|i| !(shifted[(i, i)] > 0.0)) {
                continue;
            }
            Matrix::from_fn(p, b.ncols(), |i, j| b[(i, j)] / shifted[(i, i)])
        } else {
            let Some(chol) = Cholesky::new(shifted.clone()) else {
                continue;
            };
            chol.solve(b)
        };
        if x.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let residual = (&shifted * &x - b).norm();
        if residual <= 1e-10 * (a_norm * x.norm() + b_norm) || p == 0 {
            return Ok(SpdSolution { x, jitter, residual });
        }
    }
    Err(LinalgError::FactorizationFailed {
        last_jitter: jitter,
    })
}

fn is_diagonal(a: &Matrix) -> bool {
    (0..a.ncols()).all(|j| (0..a.nrows()).all(|i| i == j || a[(i, j)] == 0.0))
}

/// Convenience for a single right-hand side.
pub fn spd_solve_vec(a: &Matrix, b: &Vector, eps: f64) -> Result<(Vector, f64, f64), LinalgError> {
    let sol = spd_solve(a, &Matrix::from_column_slice(b.len(), 1, b.as_slice()), eps)?;
    Ok((sol.x.column(0).into_owned(), sol.jitter, sol.residual))
}
