//! Singular value decomposition by one-sided Jacobi rotations.
//!
//! The public `svd` first reduces the input to a small square triangle with
//! Householder QR (operating on whichever orientation is tall), then runs
//! cyclic one-sided Jacobi on the triangle. Rank queries can bypass the QR
//! step (`SvdRoute::JacobiDirect`), which together with a reversed sweep
//! order gives a second, arithmetically independent route to the same rank.

use super::qr::{householder_qr, ColMajor};
use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 64;
const ROTATION_TOL: f64 = 1e-15;

/// Result of a singular value decomposition `A = U diag(s) V^T`.
///
/// `left_basis` is `rows x k` and `right_basis` is `cols x k` with
/// `k = min(rows, cols)`; both have orthonormal columns. `numerical_rank`
/// counts singular values above `rank_threshold`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub singular_values: Vec<f64>,
    pub left_basis: Matrix,
    pub right_basis: Matrix,
    pub numerical_rank: usize,
    pub rank_threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvdRoute {
    /// Householder-QR reduction followed by forward-cyclic Jacobi.
    QrJacobi,
    /// One-sided Jacobi on the matrix itself, reverse-cyclic sweeps.
    JacobiDirect,
}

#[derive(Clone, Copy)]
enum SweepOrder {
    Forward,
    Reverse,
}

/// One-sided Jacobi on column-major storage: orthogonalizes the columns of
/// `w` in place, optionally accumulating the right rotations into `v`
/// (`cols x cols`, column-major). Returns the number of sweeps used.
fn jacobi_orthogonalize(
    w: &mut ColMajor,
    mut v: Option<&mut ColMajor>,
    order: SweepOrder,
) -> Result<usize> {
    let (m, n) = (w.rows, w.cols);
    for sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        let pairs: Vec<(usize, usize)> = match order {
            SweepOrder::Forward => (0..n)
                .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
                .collect(),
            SweepOrder::Reverse => (0..n)
                .rev()
                .flat_map(|q| (0..q).rev().map(move |p| (p, q)))
                .collect(),
        };
        for (p, q) in pairs {
            let (alpha, beta, gamma) = {
                let cp = w.col(p);
                let cq = w.col(q);
                let mut a = 0.0;
                let mut b = 0.0;
                let mut g = 0.0;
                for i in 0..m {
                    a += cp[i] * cp[i];
                    b += cq[i] * cq[i];
                    g += cp[i] * cq[i];
                }
                (a, b, g)
            };
            if alpha == 0.0 || beta == 0.0 {
                continue;
            }
            if gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            rotate_pair(&mut w.data, m, p, q, c, s);
            if let Some(vm) = v.as_deref_mut() {
                rotate_pair(&mut vm.data, vm.rows, p, q, c, s);
            }
        }
        if !rotated {
            return Ok(sweep + 1);
        }
    }
    Err(Error::DecompositionFailure {
        rows: m,
        cols: n,
        sweeps: MAX_SWEEPS,
    })
}

#[inline]
fn rotate_pair(data: &mut [f64], rows: usize, p: usize, q: usize, c: f64, s: f64) {
    debug_assert!(p < q);
    let (head, tail) = data.split_at_mut(q * rows);
    let cp = &mut head[p * rows..(p + 1) * rows];
    let cq = &mut tail[..rows];
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *xp;
        let b = *xq;
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

fn rank_threshold_for(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * f64::EPSILON
}

/// Extracts sorted singular values (descending) from an orthogonalized
/// working set, without forming the bases.
fn extract_singular_values(w: &ColMajor) -> Vec<f64> {
    let mut sv: Vec<f64> = (0..w.cols).map(|j| super::norm2(w.col(j))).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Full SVD of a non-empty matrix with finite entries.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    svd_with_threshold(a, None)
}

/// Full SVD with an explicit rank threshold override.
pub fn svd_with_threshold(a: &Matrix, threshold: Option<f64>) -> Result<SvdResult> {
    if a.is_empty() {
        return Err(Error::Contract {
            op: "svd",
            msg: "empty matrix".into(),
        });
    }
    if !a.all_finite() {
        return Err(Error::Contract {
            op: "svd",
            msg: "non-finite entry".into(),
        });
    }
    // Tall orientation: the QR operand has rows >= cols.
    let swapped = a.rows() < a.cols();
    let tall = {
        let m = if swapped { a.cols() } else { a.rows() };
        let n = if swapped { a.rows() } else { a.cols() };
        let mut data = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                let (ai, aj) = if swapped { (j, i) } else { (i, j) };
                data[j * m + i] = a.at(ai, aj);
            }
        }
        ColMajor {
            rows: m,
            cols: n,
            data,
        }
    };
    let (m, n) = (tall.rows, tall.cols);

    // QR reduction, then Jacobi on the small triangle.
    let qr = householder_qr(tall);
    let r = qr.r();
    let mut work = ColMajor::copy_of(&r);
    let mut v = ColMajor::copy_of(&Matrix::identity(n));
    jacobi_orthogonalize(&mut work, Some(&mut v), SweepOrder::Forward)?;

    // Column norms are the singular values; sort descending.
    let mut idx: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| super::norm2(work.col(j))).collect();
    idx.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let singular_values: Vec<f64> = idx.iter().map(|&j| norms[j]).collect();
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let rank_threshold =
        threshold.unwrap_or_else(|| rank_threshold_for(a.rows(), a.cols(), sigma_max));
    let numerical_rank = singular_values
        .iter()
        .filter(|&&s| s > rank_threshold)
        .count();

    // Left vectors of R: normalized orthogonalized columns, completed to an
    // orthonormal set where the norm vanished.
    let mut u_small: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &idx {
        let nj = norms[j];
        if nj > sigma_max * f64::EPSILON && nj > 0.0 {
            u_small.push(work.col(j).iter().map(|x| x / nj).collect());
        } else {
            u_small.push(vec![0.0; n]); // placeholder, completed below
        }
    }
    complete_orthonormal(&mut u_small);

    // Lift the small left vectors through Q: U = Q * U_small (padded).
    let mut left = Matrix::zeros(m, n);
    for (jj, us) in u_small.iter().enumerate() {
        let mut col = vec![0.0; m];
        col[..n].copy_from_slice(us);
        qr.apply_q(&mut col);
        for i in 0..m {
            *left.at_mut(i, jj) = col[i];
        }
    }
    // Right vectors, permuted to the sorted order.
    let mut right = Matrix::zeros(n, n);
    for (jj, &j) in idx.iter().enumerate() {
        let vc = v.col(j);
        for i in 0..n {
            *right.at_mut(i, jj) = vc[i];
        }
    }

    let (left_basis, right_basis) = if swapped { (right, left) } else { (left, right) };
    Ok(SvdResult {
        singular_values,
        left_basis,
        right_basis,
        numerical_rank,
        rank_threshold,
    })
}

/// Replaces zero placeholder columns with unit vectors orthogonal to the
/// rest, chosen deterministically from the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>]) {
    let dim = match cols.first() {
        Some(c) => c.len(),
        None => return,
    };
    for j in 0..cols.len() {
        if cols[j].iter().any(|&x| x != 0.0) {
            continue;
        }
        'candidates: for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            // Two orthogonalization passes for stability.
            for _ in 0..2 {
                for other in cols.iter().take(j).chain(cols.iter().skip(j + 1)) {
                    let proj = super::dot(&cand, other);
                    if proj != 0.0 {
                        for (c, o) in cand.iter_mut().zip(other) {
                            *c -= proj * o;
                        }
                    }
                }
            }
            let nrm = super::norm2(&cand);
            if nrm > 0.5 {
                for c in cand.iter_mut() {
                    *c /= nrm;
                }
                cols[j] = cand;
                break 'candidates;
            }
        }
    }
}

/// Singular values only, by the requested route.
pub fn singular_values_route(a: &Matrix, route: SvdRoute) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::Contract {
            op: "singular_values",
            msg: "empty matrix".into(),
        });
    }
    match route {
        SvdRoute::QrJacobi => {
            let svd = svd(a)?;
            Ok(svd.singular_values)
        }
        SvdRoute::JacobiDirect => {
            // Work on whichever orientation has fewer columns.
            let work_src = if a.rows() >= a.cols() {
                a.clone()
            } else {
                a.transpose()
            };
            let mut w = {
                let (m, n) = (work_src.rows(), work_src.cols());
                let mut data = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        data[j * m + i] = work_src.at(i, j);
                    }
                }
                ColMajor {
                    rows: m,
                    cols: n,
                    data,
                }
            };
            jacobi_orthogonalize(&mut w, None, SweepOrder::Reverse)?;
            Ok(extract_singular_values(&w))
        }
    }
}

/// Numerical rank by the requested route, using the shared threshold rule
/// `max(rows, cols) * sigma_max * machine_epsilon` unless overridden.
pub fn numerical_rank_route(
    a: &Matrix,
    route: SvdRoute,
    threshold: Option<f64>,
) -> Result<usize> {
    let sv = singular_values_route(a, route)?;
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let thr = threshold.unwrap_or_else(|| rank_threshold_for(a.rows(), a.cols(), sigma_max));
    Ok(sv.iter().filter(|&&s| s > thr).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_raw(rows, cols, data)
    }

    fn reconstruct(s: &SvdResult, rows: usize, cols: usize) -> Matrix {
        let k = s.singular_values.len();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..k {
            let sv = s.singular_values[r];
            for i in 0..rows {
                for j in 0..cols {
                    *out.at_mut(i, j) += sv * s.left_basis.at(i, r) * s.right_basis.at(j, r);
                }
            }
        }
        out
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.numerical_rank, 3);
        for v in &s.singular_values {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let s = svd(&Matrix::zeros(2, 5)).unwrap();
        assert_eq!(s.numerical_rank, 0);
        assert!(s.singular_values.iter().all(|&v| v == 0.0));
        // Bases are still orthonormal.
        let u = &s.left_basis;
        for a in 0..u.cols() {
            for b in 0..u.cols() {
                let d: f64 = (0..u.rows()).map(|i| u.at(i, a) * u.at(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert_relative_eq!(d, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn proportional_columns_give_rank_one() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let s = svd(&a).unwrap();
        assert_eq!(s.numerical_rank, 1);
        let recon = reconstruct(&s, 3, 2);
        for i in 0..3 {
            for j in 0..2 {
                assert_relative_eq!(recon.at(i, j), a.at(i, j), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_and_orthonormality_random() {
        for (rows, cols, seed) in [(17, 9, 1u64), (9, 17, 2), (40, 40, 3)] {
            let a = random_matrix(rows, cols, seed);
            let s = svd(&a).unwrap();
            // Non-increasing, non-negative.
            for w in s.singular_values.windows(2) {
                assert!(w[0] >= w[1]);
            }
            assert!(s.singular_values.iter().all(|&v| v >= 0.0));
            let recon = reconstruct(&s, rows, cols);
            let mut err = 0.0f64;
            for i in 0..rows {
                for j in 0..cols {
                    err += (recon.at(i, j) - a.at(i, j)).powi(2);
                }
            }
            assert!(
                err.sqrt() <= 1e-10 * (1.0 + a.frob_norm()),
                "reconstruction error {} for {rows}x{cols}",
                err.sqrt()
            );
            // U^T U = I.
            for x in 0..s.left_basis.cols() {
                for y in 0..s.left_basis.cols() {
                    let d: f64 = (0..rows)
                        .map(|i| s.left_basis.at(i, x) * s.left_basis.at(i, y))
                        .sum();
                    let want = if x == y { 1.0 } else { 0.0 };
                    assert_relative_eq!(d, want, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn rank_routes_agree_on_deficient_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..8 {
            let (m, n, r) = (12 + trial, 9, 4);
            let b = random_matrix(m, r, 100 + trial as u64);
            let c = random_matrix(r, n, 200 + trial as u64);
            let a = b.matmul(&c).unwrap();
            let r1 = numerical_rank_route(&a, SvdRoute::QrJacobi, None).unwrap();
            let r2 = numerical_rank_route(&a, SvdRoute::JacobiDirect, None).unwrap();
            assert_eq!(r1, r, "QrJacobi rank");
            assert_eq!(r2, r, "JacobiDirect rank");
            let _ = rng.gen::<f64>();
        }
    }

    #[test]
    fn rank_invariant_under_transpose_and_gram() {
        for seed in 0..5u64 {
            let b = random_matrix(10, 3, seed);
            let c = random_matrix(3, 8, seed + 50);
            let a = b.matmul(&c).unwrap();
            let at = a.transpose();
            let gram = a.matmul(&at).unwrap();
            let ra = numerical_rank_route(&a, SvdRoute::QrJacobi, None).unwrap();
            let rat = numerical_rank_route(&at, SvdRoute::QrJacobi, None).unwrap();
            let rg = numerical_rank_route(&gram, SvdRoute::QrJacobi, None).unwrap();
            assert_eq!(ra, rat);
            assert_eq!(ra, rg);
        }
    }
}
