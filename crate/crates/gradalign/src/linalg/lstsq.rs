//! Minimum-norm least squares and column-space membership.
//!
//! `least_squares` returns the Moore-Penrose solution `A^+ y`. Internally the
//! long dimension is first reduced by Householder QR so the pseudo-inverse is
//! only ever applied to a small triangular factor:
//!
//! - tall `A` (rows >= cols): `A = QR`, solve `min ||R x - Q^T y||`;
//! - wide `A` (cols > rows): `A = R^T Q^T` via QR of `A^T`, solve
//!   `z = (R^T)^+ y` and lift `x = Q z`; `||x|| = ||z||`.
//!
//! `lsq_norms` is the same computation restricted to the residual and
//! solution norms; the wide case then needs no `Q` at all, so the triangle
//! comes from the blocked R-only reduction and the whole test costs one pass
//! over the matrix. This is what the alignment certificate calls in a loop.

use super::qr::{householder_qr, tsqr_r, ColMajor};
use super::svd::svd;
use super::{norm2, Matrix};
use crate::error::{Error, Result};

/// Norm-level result of a least-squares solve.
#[derive(Clone, Copy, Debug)]
pub struct LsqNorms {
    pub residual_norm: f64,
    pub solution_norm: f64,
}

/// Membership of a vector in the column space of a matrix.
#[derive(Clone, Copy, Debug)]
pub struct Membership {
    pub member: bool,
    pub rel_residual: f64,
}

fn check_rows(op: &'static str, a: &Matrix, y: &[f64]) -> Result<()> {
    if a.rows() != y.len() {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{} rhs entries", a.rows()),
            got: format!("{}", y.len()),
        });
    }
    Ok(())
}

/// Applies the pseudo-inverse of a small square matrix to `y`.
fn pinv_apply_small(r: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    let s = svd(r)?;
    let k = s.singular_values.len();
    let mut coeffs = vec![0.0; k];
    for j in 0..s.numerical_rank.min(k) {
        let sv = s.singular_values[j];
        if sv <= s.rank_threshold {
            continue;
        }
        let uy: f64 = (0..r.rows()).map(|i| s.left_basis.at(i, j) * y[i]).sum();
        coeffs[j] = uy / sv;
    }
    let mut x = vec![0.0; r.cols()];
    for j in 0..k {
        if coeffs[j] != 0.0 {
            for (i, xv) in x.iter_mut().enumerate() {
                *xv += coeffs[j] * s.right_basis.at(i, j);
            }
        }
    }
    Ok(x)
}

/// Minimum-norm least-squares solution and residual norm `||A x - y||`.
pub fn least_squares(a: &Matrix, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_rows("least_squares", a, y)?;
    if a.is_empty() {
        return Err(Error::Contract {
            op: "least_squares",
            msg: "empty matrix".into(),
        });
    }
    if a.rows() >= a.cols() {
        let qr = householder_qr(ColMajor::copy_of(a));
        let r = qr.r();
        let mut yq = y.to_vec();
        qr.apply_qt(&mut yq);
        let w = &yq[..a.cols()];
        let x = pinv_apply_small(&r, w)?;
        let rx = r.matvec(&x)?;
        let head_sq: f64 = rx.iter().zip(w).map(|(p, q)| (p - q) * (p - q)).sum();
        let tail_sq: f64 = yq[a.cols()..].iter().map(|v| v * v).sum();
        Ok((x, (head_sq + tail_sq).sqrt()))
    } else {
        // A = R^T Q^T with A^T = Q R; columns of A^T are the rows of A.
        let qr = householder_qr(ColMajor::transpose_of(a));
        let r = qr.r();
        let z = pinv_apply_small(&r.transpose(), y)?;
        let rtz = r.matvec_transa(&z)?;
        let residual = norm2(
            &rtz.iter()
                .zip(y)
                .map(|(p, q)| p - q)
                .collect::<Vec<f64>>(),
        );
        let mut x = vec![0.0; a.cols()];
        x[..a.rows()].copy_from_slice(&z);
        qr.apply_q(&mut x);
        Ok((x, residual))
    }
}

/// Residual and solution norms of the minimum-norm least-squares problem,
/// without materializing the solution.
pub fn lsq_norms(a: &Matrix, y: &[f64]) -> Result<LsqNorms> {
    check_rows("lsq_norms", a, y)?;
    if a.is_empty() {
        return Err(Error::Contract {
            op: "lsq_norms",
            msg: "empty matrix".into(),
        });
    }
    if a.cols() > a.rows() {
        let r = tsqr_r(&ColMajor::transpose_of(a));
        let z = pinv_apply_small(&r.transpose(), y)?;
        let rtz = r.matvec_transa(&z)?;
        let diff: Vec<f64> = rtz.iter().zip(y).map(|(p, q)| p - q).collect();
        Ok(LsqNorms {
            residual_norm: norm2(&diff),
            solution_norm: norm2(&z),
        })
    } else {
        let (x, residual) = least_squares(a, y)?;
        Ok(LsqNorms {
            residual_norm: residual,
            solution_norm: norm2(&x),
        })
    }
}

/// Tests `y in Col(A)` by the relative least-squares residual
/// `||A A^+ y - y|| / ||y||`. A zero right-hand side is a member by
/// convention.
pub fn col_membership(a: &Matrix, y: &[f64], rel_tol: f64) -> Result<Membership> {
    check_rows("col_membership", a, y)?;
    if rel_tol <= 0.0 {
        return Err(Error::Contract {
            op: "col_membership",
            msg: format!("rel_tol must be positive, got {rel_tol}"),
        });
    }
    let ynorm = norm2(y);
    if ynorm == 0.0 {
        return Ok(Membership {
            member: true,
            rel_residual: 0.0,
        });
    }
    let norms = lsq_norms(a, y)?;
    let rel_residual = norms.residual_norm / ynorm;
    Ok(Membership {
        member: rel_residual <= rel_tol,
        rel_residual,
    })
}
