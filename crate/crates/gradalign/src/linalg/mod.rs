//! Dense real matrix core: SVD, numerical rank, least squares, column-space
//! membership, Frobenius norms.
//!
//! Everything is `f64`, row-major, and implemented in this crate (one-sided
//! Jacobi SVD with Householder-QR preprocessing; no external numerical
//! backend). All routines are pure functions over immutable inputs and are
//! safe to call concurrently. Where rayon is used internally, every output
//! element is computed independently of thread scheduling, so results are
//! bitwise-deterministic for a fixed input.

mod lstsq;
mod qr;
mod svd;

pub use lstsq::{col_membership, least_squares, lsq_norms, LsqNorms, Membership};
pub use svd::{numerical_rank_route, singular_values_route, svd, SvdResult, SvdRoute};

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Validating constructor: checks the length invariant and that every
    /// entry is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::new",
                expected: format!("{} entries ({rows}x{cols})", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract {
                op: "Matrix::new",
                msg: "non-finite entry".into(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Non-validating constructor for internal kernels whose inputs are
    /// already known finite.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "Matrix::from_rows",
                    expected: format!("{c} entries per row"),
                    got: format!("{} in row {i}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `A * B`.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: format!("inner dims equal ({} vs {})", self.cols, b.rows),
                got: format!("{}x{} * {}x{}", self.rows, self.cols, b.rows, b.cols),
            });
        }
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = vec![0.0; m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
            let arow = &self.data[i * k..(i + 1) * k];
            for (p, &a) in arow.iter().enumerate() {
                if a != 0.0 {
                    let brow = &b.data[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += a * bv;
                    }
                }
            }
        });
        Ok(Matrix::from_raw(m, n, out))
    }

    /// `A * B^T`; both operands are traversed row-contiguously.
    pub fn matmul_transb(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_transb",
                expected: format!("equal col counts ({} vs {})", self.cols, b.cols),
                got: format!("{}x{} * ({}x{})^T", self.rows, self.cols, b.rows, b.cols),
            });
        }
        let (m, n) = (self.rows, b.rows);
        let mut out = vec![0.0; m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
            let arow = self.row(i);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot(arow, b.row(j));
            }
        });
        Ok(Matrix::from_raw(m, n, out))
    }

    /// `A * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                expected: format!("{}", self.cols),
                got: format!("{}", x.len()),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `A^T * x`.
    pub fn matvec_transa(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "matvec_transa",
                expected: format!("{}", self.rows),
                got: format!("{}", x.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi != 0.0 {
                for (o, &a) in out.iter_mut().zip(self.row(i)) {
                    *o += xi * a;
                }
            }
        }
        Ok(out)
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sum of squared entries.
pub fn frob_norm_sq(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum()
}

impl Matrix {
    pub fn frob_norm_sq(&self) -> f64 {
        frob_norm_sq(self)
    }
}

/// Dot product with four independent accumulators; the split keeps the
/// floating add chains short enough to pipeline and is bitwise-deterministic
/// for a fixed length.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let (mut s4, mut s5, mut s6, mut s7) = (0.0, 0.0, 0.0, 0.0);
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        s0 += xa[0] * xb[0];
        s1 += xa[1] * xb[1];
        s2 += xa[2] * xb[2];
        s3 += xa[3] * xb[3];
        s4 += xa[4] * xb[4];
        s5 += xa[5] * xb[5];
        s6 += xa[6] * xb[6];
        s7 += xa[7] * xb[7];
    }
    let mut tail = 0.0;
    for (xa, xb) in ra.iter().zip(rb) {
        tail += xa * xb;
    }
    ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7)) + tail
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * *xv;
    }
}

/// Crate-internal dot product shared with the model kernels.
#[inline]
pub(crate) fn row_dot(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
