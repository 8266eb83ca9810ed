//! Householder QR kernels on column-major working storage.
//!
//! Two entry points: a reflector-keeping factorization used when the caller
//! needs `Q` (or `Q^T y`), and a blocked R-only reduction (chunked tall-skinny
//! QR) used by the hot least-squares paths where only the triangular factor
//! matters. Chunk geometry is a fixed constant, so results do not depend on
//! thread scheduling.

use super::{axpy, dot, Matrix};
use rayon::prelude::*;

/// Column-major storage: column `j` occupies `data[j*rows .. (j+1)*rows]`.
pub(crate) struct ColMajor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ColMajor {
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Interprets the row-major matrix `a` as the column-major storage of
    /// `a^T` (no copy of layout; rows of `a` become columns).
    pub fn transpose_of(a: &Matrix) -> ColMajor {
        ColMajor {
            rows: a.cols(),
            cols: a.rows(),
            data: a.data().to_vec(),
        }
    }

    /// Column-major copy of `a` itself.
    pub fn copy_of(a: &Matrix) -> ColMajor {
        let (m, n) = (a.rows(), a.cols());
        let mut data = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                data[j * m + i] = a.at(i, j);
            }
        }
        ColMajor {
            rows: m,
            cols: n,
            data,
        }
    }
}

/// Householder factorization of a tall matrix (`rows >= cols`), in place.
/// After the call the upper triangle holds `R`; the strict lower triangle of
/// each column holds the reflector tail (first component 1 implicit).
pub(crate) struct HouseholderQr {
    pub work: ColMajor,
    pub tau: Vec<f64>,
}

pub(crate) fn householder_qr(mut w: ColMajor) -> HouseholderQr {
    assert!(w.rows >= w.cols, "householder_qr requires rows >= cols");
    let (m, n) = (w.rows, w.cols);
    let mut tau = vec![0.0; n];
    for k in 0..n {
        let (head, tail) = w.data.split_at_mut((k + 1) * m);
        let colk = &mut head[k * m + k..];
        let normx = super::norm2(colk);
        if normx == 0.0 {
            tau[k] = 0.0;
            continue;
        }
        let alpha = colk[0];
        let sign = if alpha >= 0.0 { 1.0 } else { -1.0 };
        let v0 = alpha + sign * normx;
        for v in colk[1..].iter_mut() {
            *v /= v0;
        }
        colk[0] = -sign * normx; // R_kk
        let t = (alpha.abs() + normx) / normx;
        tau[k] = t;

        // Apply H_k = I - tau * u u^T to the trailing columns. Sequential on
        // purpose: callers parallelize at the block level.
        let u = &head[k * m + k + 1..(k + 1) * m]; // u[0] = 1 implicit
        let len = m - k;
        for colj in tail.chunks_mut(m) {
            let cj = &mut colj[k..k + len];
            let mut wdot = cj[0] + dot(&cj[1..], u);
            wdot *= t;
            cj[0] -= wdot;
            axpy(-wdot, u, &mut cj[1..]);
        }
    }
    HouseholderQr { work: w, tau }
}

impl HouseholderQr {
    /// The `cols x cols` upper-triangular factor.
    pub fn r(&self) -> Matrix {
        let n = self.work.cols;
        let m = self.work.rows;
        let mut r = Matrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j.min(n - 1) {
                *r.at_mut(i, j) = self.work.data[j * m + i];
            }
        }
        r
    }

    /// Applies `Q^T` to `y` in place (`y` has `rows` entries).
    pub fn apply_qt(&self, y: &mut [f64]) {
        let (m, n) = (self.work.rows, self.work.cols);
        assert_eq!(y.len(), m);
        for k in 0..n {
            let t = self.tau[k];
            if t == 0.0 {
                continue;
            }
            let u = &self.work.data[k * m + k + 1..(k + 1) * m];
            let mut wdot = y[k];
            for (yv, uv) in y[k + 1..].iter().zip(u) {
                wdot += *yv * *uv;
            }
            wdot *= t;
            y[k] -= wdot;
            for (yv, uv) in y[k + 1..].iter_mut().zip(u) {
                *yv -= wdot * *uv;
            }
        }
    }

    /// Applies `Q` to `y` in place.
    pub fn apply_q(&self, y: &mut [f64]) {
        let (m, n) = (self.work.rows, self.work.cols);
        assert_eq!(y.len(), m);
        for k in (0..n).rev() {
            let t = self.tau[k];
            if t == 0.0 {
                continue;
            }
            let u = &self.work.data[k * m + k + 1..(k + 1) * m];
            let mut wdot = y[k];
            for (yv, uv) in y[k + 1..].iter().zip(u) {
                wdot += *yv * *uv;
            }
            wdot *= t;
            y[k] -= wdot;
            for (yv, uv) in y[k + 1..].iter_mut().zip(u) {
                *yv -= wdot * *uv;
            }
        }
    }
}

/// Row-chunk size for the blocked R-only reduction; small enough that a
/// block of a few hundred columns stays L2-resident across the reflector
/// sweeps.
const TSQR_CHUNK: usize = 1024;

/// R factor of a tall matrix given as column-major storage, computed by
/// chunked QR: factor fixed-size row blocks independently, stack the partial
/// triangles, and repeat until one block remains. The final block absorbs
/// any remainder shorter than the column count.
pub(crate) fn tsqr_r(w: &ColMajor) -> Matrix {
    let n = w.cols;
    let mut rows = w.rows;
    let mut data = w.data.clone();
    while rows > TSQR_CHUNK.max(2 * n) {
        let mut bounds: Vec<(usize, usize)> = Vec::new();
        let mut r0 = 0;
        while r0 < rows {
            let mut r1 = (r0 + TSQR_CHUNK).min(rows);
            if rows - r1 < n {
                r1 = rows; // absorb a short tail so every block has >= n rows
            }
            bounds.push((r0, r1));
            r0 = r1;
        }
        let triangles: Vec<Vec<f64>> = bounds
            .into_par_iter()
            .map(|(r0, r1)| {
                let bm = r1 - r0;
                let mut block = vec![0.0; bm * n];
                for j in 0..n {
                    block[j * bm..(j + 1) * bm]
                        .copy_from_slice(&data[j * rows + r0..j * rows + r1]);
                }
                let qr = householder_qr(ColMajor {
                    rows: bm,
                    cols: n,
                    data: block,
                });
                let k = bm.min(n);
                // Column-major k x n triangle.
                let mut tri = vec![0.0; k * n];
                for j in 0..n {
                    for i in 0..=j.min(k - 1) {
                        tri[j * k + i] = qr.work.data[j * bm + i];
                    }
                }
                tri
            })
            .collect();
        let new_rows: usize = triangles
            .iter()
            .map(|t| t.len() / n)
            .sum();
        let mut stacked = vec![0.0; new_rows * n];
        let mut off = 0;
        for tri in &triangles {
            let k = tri.len() / n;
            for j in 0..n {
                stacked[j * new_rows + off..j * new_rows + off + k]
                    .copy_from_slice(&tri[j * k..(j + 1) * k]);
            }
            off += k;
        }
        rows = new_rows;
        data = stacked;
    }
    householder_qr(ColMajor {
        rows,
        cols: n,
        data,
    })
    .r()
}
