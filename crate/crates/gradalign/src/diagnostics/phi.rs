//! The gated-head feature matrix and everything built on it: the
//! safe-exploration rank certificate, the exact smoothness constant of the
//! exploitation objective, and its closed-form gradient.

use super::stacked_loss_gradients;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank_route, Matrix, SvdRoute};
use crate::losses::sigmoid;
use crate::model::{
    forward, init_params, lower_output_z, GateState, NetworkSpec, ParamVector,
    DEFAULT_JACOBIAN_CAP,
};
use crate::rng::{self, Stream};
use serde::Serialize;

/// Feature matrix of the frozen-gate head: `n x (m_H * m_{H-1})`, where row
/// `i`, block `k` is `sig(z_i^T q_{*k}) * z_i^T`. `q` has shape
/// `m_{H-1} x m_H` (one column per head unit), and the gate sigmoid uses the
/// network's gate sharpness.
pub fn phi(
    net: &NetworkSpec,
    params: &ParamVector,
    q: &Matrix,
    x: &Matrix,
) -> Result<Matrix> {
    if !net.is_gated() {
        return Err(Error::Contract {
            op: "phi",
            msg: "requires a gated head".into(),
        });
    }
    let (m_h, m_hm1) = (net.m_h(), net.m_hm1());
    if q.rows() != m_hm1 || q.cols() != m_h {
        return Err(Error::ShapeMismatch {
            op: "phi",
            expected: format!("{m_hm1}x{m_h} gate argument"),
            got: format!("{}x{}", q.rows(), q.cols()),
        });
    }
    let n = x.rows();
    if n.saturating_mul(m_h * m_hm1) > DEFAULT_JACOBIAN_CAP {
        return Err(Error::SizeExceeded {
            op: "phi",
            required: n * m_h * m_hm1,
            cap: DEFAULT_JACOBIAN_CAP,
        });
    }
    let z = lower_output_z(net, params, x)?;
    let sp = net.gate_sharpness;
    let mut out = Matrix::zeros(n, m_h * m_hm1);
    for i in 0..n {
        let zrow = z.row(i);
        // One pass per head unit: gate value times z.
        for k in 0..m_h {
            let mut pre = 0.0;
            for (zv, r) in zrow.iter().enumerate() {
                pre += q.at(zv, k) * r;
            }
            let g = sigmoid(sp * pre);
            let slab = &mut out.row_mut(i)[k * m_hm1..(k + 1) * m_hm1];
            for (o, &zv) in slab.iter_mut().zip(zrow) {
                *o = g * zv;
            }
        }
    }
    Ok(out)
}

/// `phi * (diag(theta_Hj) kron I) * v` without materializing the Kronecker
/// factor: block `k` of `v` is scaled by `theta_Hj[k]` before the product.
pub fn scaled_phi_apply(phi: &Matrix, theta_hj: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let blocks = theta_hj.len();
    if blocks == 0 || phi.cols() % blocks != 0 || v.len() != phi.cols() {
        return Err(Error::ShapeMismatch {
            op: "scaled_phi_apply",
            expected: format!("v of length {} in {blocks} blocks", phi.cols()),
            got: format!("{}", v.len()),
        });
    }
    let block = phi.cols() / blocks;
    let mut scaled = v.to_vec();
    for (k, &t) in theta_hj.iter().enumerate() {
        for s in scaled[k * block..(k + 1) * block].iter_mut() {
            *s *= t;
        }
    }
    phi.matvec(&scaled)
}

/// Certificate that the head's feature matrix reaches full row rank at a
/// random gate argument and freshly initialized lower layers.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SafeExplorationCertificate {
    pub n: usize,
    pub m_h: usize,
    pub m_hm1: usize,
    pub phi_rank: usize,
    /// Rank recomputed by the second decomposition route.
    pub phi_rank_alt: usize,
    pub satisfied: bool,
    pub seed: u64,
}

/// Draws `q ~ N(0,1)` entrywise and lower-layer parameters from the default
/// initialization, builds the feature matrix on `x`, and reports its
/// numerical rank under both decomposition routes. The condition is
/// satisfied iff the rank equals `n`.
pub fn safe_exploration_check(
    net: &NetworkSpec,
    x: &Matrix,
    seed: u64,
) -> Result<SafeExplorationCertificate> {
    if !net.is_gated() {
        return Err(Error::Contract {
            op: "safe_exploration_check",
            msg: "requires a gated head".into(),
        });
    }
    let n = x.rows();
    let (m_h, m_hm1) = (net.m_h(), net.m_hm1());
    let params = init_params(net, &mut rng::stream(seed, Stream::Init));
    let mut probe = rng::stream(seed, Stream::Probe);
    let q = Matrix::from_raw(m_hm1, m_h, rng::normal_vec(&mut probe, m_hm1 * m_h));
    let ph = phi(net, &params, &q, x)?;
    let phi_rank = numerical_rank_route(&ph, SvdRoute::QrJacobi, None)?;
    let phi_rank_alt = numerical_rank_route(&ph, SvdRoute::JacobiDirect, None)?;
    Ok(SafeExplorationCertificate {
        n,
        m_h,
        m_hm1,
        phi_rank,
        phi_rank_alt,
        satisfied: phi_rank == n && phi_rank_alt == n,
        seed,
    })
}

/// Head sizing rule: smallest `m_H` with `m_H * m_{H-1} >= 2n`.
pub fn head_width_rule(n: usize, m_hm1: usize) -> usize {
    (2 * n).div_ceil(m_hm1)
}

/// The gate arguments of the frozen head, transposed into the `phi`
/// orientation (`m_{H-1} x m_H`, one column per head unit).
fn frozen_gate_argument(r: &Matrix) -> Matrix {
    r.transpose()
}

/// Exact gradient-Lipschitz constant of the exploitation objective:
/// `Lhat = (L_loss / n) * ||Z||^2` with
/// `Z_i = max_j ||(diag(theta_Hj) kron I) phi_j[i,:]^T||`.
pub fn lhat(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    ds: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    let rs = gates.frozen_matrices().ok_or(Error::Contract {
        op: "lhat",
        msg: "gates must be frozen".into(),
    })?;
    let n = ds.len();
    let (m_h, m_hm1) = (net.m_h(), net.m_hm1());
    let gl = params.layout.gated.as_ref().unwrap();
    let mut z = vec![0.0; n];
    for (j, r) in rs.iter().enumerate() {
        let q = frozen_gate_argument(r);
        let ph = phi(net, params, &q, &ds.x)?;
        let theta_hj = &params.theta[gl.w_h[j].clone()];
        for i in 0..n {
            let row = ph.row(i);
            let mut norm_sq = 0.0;
            for k in 0..m_h {
                let t = theta_hj[k];
                if t != 0.0 {
                    let blk = &row[k * m_hm1..(k + 1) * m_hm1];
                    let b: f64 = blk.iter().map(|v| v * v).sum();
                    norm_sq += t * t * b;
                }
            }
            let norm = norm_sq.sqrt();
            if norm > z[i] {
                z[i] = norm;
            }
        }
    }
    let l_loss = ds.kind.lipschitz();
    let zsq: f64 = z.iter().map(|v| v * v).sum();
    Ok((l_loss / n as f64 * zsq, z))
}

/// Closed-form gradient of the exploitation objective with respect to the
/// penultimate layer: per output `j`, the block
/// `(diag(theta_Hj) kron I) phi_j^T r_j` with `r_j` the stacked per-sample
/// loss derivatives in output `j`, divided by `n`.
pub fn exploitation_grad_closed_form(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    ds: &Dataset,
) -> Result<Vec<f64>> {
    let rs = gates.frozen_matrices().ok_or(Error::Contract {
        op: "exploitation_grad_closed_form",
        msg: "gates must be frozen".into(),
    })?;
    let (m_h, m_hm1) = (net.m_h(), net.m_hm1());
    let gl = params.layout.gated.as_ref().unwrap();
    let preds = forward(net, params, gates, &ds.x)?;
    let r_stacked = stacked_loss_gradients(ds.kind, &preds, &ds.y)?;
    let mut out = vec![0.0; net.output_dim() * m_h * m_hm1];
    for (j, r_mat) in rs.iter().enumerate() {
        let q = frozen_gate_argument(r_mat);
        let ph = phi(net, params, &q, &ds.x)?;
        let w = ph.matvec_transa(&r_stacked[j])?;
        let theta_hj = &params.theta[gl.w_h[j].clone()];
        let base = j * m_h * m_hm1;
        for k in 0..m_h {
            let t = theta_hj[k];
            for s in 0..m_hm1 {
                out[base + k * m_hm1 + s] = t * w[k * m_hm1 + s];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::losses::LossKind;
    use crate::model::{jacobian, loss_gradient};
    use crate::rng::{normal_vec, stream};
    use approx::assert_relative_eq;

    fn gated_fixture(seed: u64) -> (NetworkSpec, ParamVector, Matrix) {
        let net = NetworkSpec::gated(vec![2, 5, 4, 2], 10.0, 3.0).unwrap();
        let params = init_params(&net, &mut stream(seed, Stream::Init));
        let x = Matrix::from_raw(6, 2, normal_vec(&mut stream(seed + 1, Stream::Data), 12));
        (net, params, x)
    }

    #[test]
    fn phi_single_block_and_zero_gate() {
        let net = NetworkSpec::gated(vec![2, 3, 1], 10.0, 2.0).unwrap(); // H = 2, z = [x|1]
        let params = init_params(&net, &mut stream(1, Stream::Init));
        let x = Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let (m_h, m_hm1) = (net.m_h(), net.m_hm1());
        assert_eq!((m_h, m_hm1), (3, 3));
        // q = 0: every block is 0.5 * z^T.
        let q = Matrix::zeros(m_hm1, m_h);
        let ph = phi(&net, &params, &q, &x).unwrap();
        let z = [0.5, -1.0, 1.0];
        for k in 0..m_h {
            for s in 0..m_hm1 {
                assert_relative_eq!(ph.at(0, k * m_hm1 + s), 0.5 * z[s], epsilon = 1e-14);
            }
        }
        // Single-unit case: phi row = sig(z.q) * z^T.
        let net1 = NetworkSpec::gated(vec![2, 1, 1], 10.0, 2.0).unwrap();
        let params1 = init_params(&net1, &mut stream(2, Stream::Init));
        let qv = Matrix::new(3, 1, vec![0.3, -0.2, 0.7]).unwrap();
        let ph = phi(&net1, &params1, &qv, &x).unwrap();
        let pre = 0.3 * 0.5 + (-0.2) * (-1.0) + 0.7;
        let g = sigmoid(2.0 * pre);
        for s in 0..3 {
            assert_relative_eq!(ph.at(0, s), g * z[s], epsilon = 1e-14);
        }
    }

    #[test]
    fn frozen_forward_equals_phi_reconstruction() {
        let (net, params, x) = gated_fixture(3);
        let gates = GateState::freeze(&net, &params).unwrap();
        let out = forward(&net, &params, &gates, &x).unwrap();
        let gl = params.layout.gated.clone().unwrap();
        let rs = gates.frozen_matrices().unwrap();
        for j in 0..net.output_dim() {
            let q = frozen_gate_argument(&rs[j]);
            let ph = phi(&net, &params, &q, &x).unwrap();
            let theta_hj = params.theta[gl.w_h[j].clone()].to_vec();
            // vec_rows of the penultimate matrix is its flat storage.
            let v = params.theta[gl.w_hm1[j].clone()].to_vec();
            let got = scaled_phi_apply(&ph, &theta_hj, &v).unwrap();
            for i in 0..x.rows() {
                let want = out.at(i, j);
                assert!(
                    (got[i] - want).abs() <= 1e-10 * (1.0 + want.abs()),
                    "sample {i}, output {j}: {} vs {}",
                    got[i],
                    want
                );
            }
        }
    }

    #[test]
    fn jacobian_penultimate_block_matches_scaled_phi() {
        let (net, params, x) = gated_fixture(5);
        let gates = GateState::freeze(&net, &params).unwrap();
        let jac = jacobian(&net, &params, &gates, &x).unwrap();
        let gl = params.layout.gated.clone().unwrap();
        let rs = gates.frozen_matrices().unwrap();
        let n = x.rows();
        let (m_h, m_hm1) = (net.m_h(), net.m_hm1());
        for j in 0..net.output_dim() {
            let q = frozen_gate_argument(&rs[j]);
            let ph = phi(&net, &params, &q, &x).unwrap();
            let theta_hj = &params.theta[gl.w_h[j].clone()];
            for i in 0..n {
                let jrow = jac.row(j * n + i);
                let prow = ph.row(i);
                for k in 0..m_h {
                    for s in 0..m_hm1 {
                        let want = theta_hj[k] * prow[k * m_hm1 + s];
                        let got = jrow[gl.w_hm1[j].start + k * m_hm1 + s];
                        assert!(
                            (got - want).abs() <= 1e-12 * (1.0 + want.abs()),
                            "j={j} i={i} k={k} s={s}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn scaled_apply_matches_dense_kronecker_oracle() {
        let mut rng = stream(7, Stream::Probe);
        for _ in 0..5 {
            let (m_h, m_hm1, n) = (4, 3, 5);
            let ph = Matrix::from_raw(n, m_h * m_hm1, normal_vec(&mut rng, n * m_h * m_hm1));
            let theta: Vec<f64> = normal_vec(&mut rng, m_h);
            let v: Vec<f64> = normal_vec(&mut rng, m_h * m_hm1);
            // Dense oracle: build diag(theta) kron I explicitly.
            let mut kron = Matrix::zeros(m_h * m_hm1, m_h * m_hm1);
            for k in 0..m_h {
                for s in 0..m_hm1 {
                    *kron.at_mut(k * m_hm1 + s, k * m_hm1 + s) = theta[k];
                }
            }
            let want = ph.matvec(&kron.matvec(&v).unwrap()).unwrap();
            let got = scaled_phi_apply(&ph, &theta, &v).unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn scaled_apply_unit_vector_and_ones() {
        let mut rng = stream(8, Stream::Probe);
        let (m_h, m_hm1, n) = (3, 2, 4);
        let ph = Matrix::from_raw(n, m_h * m_hm1, normal_vec(&mut rng, n * m_h * m_hm1));
        let theta = vec![2.0, -1.0, 0.5];
        // All-ones theta: plain matvec.
        let v = normal_vec(&mut rng, m_h * m_hm1);
        let plain = ph.matvec(&v).unwrap();
        let got = scaled_phi_apply(&ph, &[1.0, 1.0, 1.0], &v).unwrap();
        assert_eq!(plain, got);
        // Unit vector: scaled column.
        let mut e = vec![0.0; m_h * m_hm1];
        e[1 * m_hm1 + 1] = 1.0;
        let got = scaled_phi_apply(&ph, &theta, &e).unwrap();
        for i in 0..n {
            assert_relative_eq!(got[i], theta[1] * ph.at(i, 1 * m_hm1 + 1), epsilon = 1e-14);
        }
    }

    #[test]
    fn head_width_rule_matches_reference_arithmetic() {
        assert_eq!(head_width_rule(60000, 513), 234);
        assert_eq!(head_width_rule(50000, 513), 195);
        assert_eq!(head_width_rule(1000, 513), 4);
        assert_eq!(head_width_rule(73257, 513), 286);
    }

    #[test]
    fn safe_exploration_dimension_bound() {
        // m_H * m_{H-1} < n forces failure.
        let net = NetworkSpec::gated(vec![2, 3, 2, 1], 10.0, 1.0).unwrap();
        let n = 20;
        let x = Matrix::from_raw(n, 2, normal_vec(&mut stream(9, Stream::Data), n * 2));
        let cert = safe_exploration_check(&net, &x, 1).unwrap();
        assert!(cert.m_h * cert.m_hm1 < n);
        assert!(!cert.satisfied);
        assert!(cert.phi_rank <= cert.m_h * cert.m_hm1);
    }

    #[test]
    fn safe_exploration_satisfied_on_adequate_head() {
        let net = NetworkSpec::gated(vec![4, 7, 6, 1], 100.0, 1.0).unwrap();
        let n = 30;
        let x = Matrix::from_raw(n, 4, normal_vec(&mut stream(10, Stream::Data), n * 4));
        let cert = safe_exploration_check(&net, &x, 3).unwrap();
        assert!(cert.m_h * cert.m_hm1 >= n);
        assert_eq!(cert.phi_rank, n);
        assert_eq!(cert.phi_rank_alt, n);
        assert!(cert.satisfied);
    }

    #[test]
    fn lhat_zero_last_layer_and_one_block_case() {
        let (net, mut params, x) = gated_fixture(11);
        let y = Matrix::zeros(6, 2);
        let ds = Dataset::new(x.clone(), y, LossKind::Squared, "t", 0).unwrap();
        let gates = GateState::freeze(&net, &params).unwrap();
        let gl = params.layout.gated.clone().unwrap();
        for r in &gl.w_h {
            for k in r.clone() {
                params.theta[k] = 0.0;
            }
        }
        let (l, z) = lhat(&net, &params, &gates, &ds).unwrap();
        assert_eq!(l, 0.0);
        assert!(z.iter().all(|&v| v == 0.0));

        // Single sample, one output, one head unit: Z_1 = |theta_H| *
        // sig(R z) * ||z||.
        let net1 = NetworkSpec::gated(vec![1, 1, 1], 10.0, 2.0).unwrap();
        let params1 = init_params(&net1, &mut stream(12, Stream::Init));
        let x1 = Matrix::from_rows(&[vec![0.8]]).unwrap();
        let y1 = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let ds1 = Dataset::new(x1.clone(), y1, LossKind::Squared, "t", 0).unwrap();
        let gates1 = GateState::freeze(&net1, &params1).unwrap();
        let (l1, z1) = lhat(&net1, &params1, &gates1, &ds1).unwrap();
        let gl1 = params1.layout.gated.clone().unwrap();
        let theta_h = params1.theta[gl1.w_h[0].clone()][0];
        let r = gates1.frozen_matrices().unwrap()[0].clone();
        let zvec = [0.8, 1.0];
        let pre = r.at(0, 0) * zvec[0] + r.at(0, 1) * zvec[1];
        let znorm = (zvec[0] * zvec[0] + zvec[1] * zvec[1]).sqrt();
        let want = theta_h.abs() * sigmoid(2.0 * pre) * znorm;
        assert_relative_eq!(z1[0], want, epsilon = 1e-12);
        assert_relative_eq!(l1, 2.0 * want * want, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_gradient_matches_backprop_restriction() {
        let (net, params, x) = gated_fixture(13);
        let mut rng = stream(14, Stream::Probe);
        let y = Matrix::from_raw(6, 2, normal_vec(&mut rng, 12));
        let ds = Dataset::new(x.clone(), y, LossKind::Squared, "t", 0).unwrap();
        let gates = GateState::freeze(&net, &params).unwrap();
        let closed = exploitation_grad_closed_form(&net, &params, &gates, &ds).unwrap();
        let full = loss_gradient(&net, &params, &gates, &ds.x, &ds.y, ds.kind, None).unwrap();
        let layout = params.layout.layer_ranges[net.depth() - 2].clone();
        let restricted = &full[layout];
        assert_eq!(closed.len(), restricted.len());
        for (a, b) in closed.iter().zip(restricted) {
            assert!(
                (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
                "closed {a} vs autodiff {b}"
            );
        }
    }

    #[test]
    fn closed_form_gradient_zero_at_stationary_residuals() {
        // Squared loss with targets equal to the outputs: every per-sample
        // gradient is zero, so the closed form must vanish.
        let (net, params, x) = gated_fixture(15);
        let gates = GateState::freeze(&net, &params).unwrap();
        let out = forward(&net, &params, &gates, &x).unwrap();
        let ds = Dataset::new(x.clone(), out, LossKind::Squared, "t", 0).unwrap();
        let g = exploitation_grad_closed_form(&net, &params, &gates, &ds).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn closed_form_gradient_scales_with_last_layer() {
        let (net, params, x) = gated_fixture(16);
        let mut rng = stream(17, Stream::Probe);
        let y = Matrix::from_raw(6, 2, normal_vec(&mut rng, 12));
        let ds = Dataset::new(x.clone(), y, LossKind::Squared, "t", 0).unwrap();
        let gates = GateState::freeze(&net, &params).unwrap();
        let g1 = exploitation_grad_closed_form(&net, &params, &gates, &ds).unwrap();
        // Scaling theta_H by c scales each block by c when the residuals r_j
        // are held fixed; emulate by scaling after the fact and comparing to
        // a recomputation with scaled theta_H but identical predictions.
        let preds = forward(&net, &params, &gates, &ds.x).unwrap();
        let r = stacked_loss_gradients(ds.kind, &preds, &ds.y).unwrap();
        let gl = params.layout.gated.clone().unwrap();
        let c = 2.5;
        let mut scaled = params.clone();
        for range in &gl.w_h {
            for k in range.clone() {
                scaled.theta[k] *= c;
            }
        }
        // Recompute with scaled diag factor but the original residuals.
        let (m_h, m_hm1) = (net.m_h(), net.m_hm1());
        let rs = gates.frozen_matrices().unwrap();
        let mut g2 = vec![0.0; net.output_dim() * m_h * m_hm1];
        for (j, rm) in rs.iter().enumerate() {
            let q = frozen_gate_argument(rm);
            let ph = phi(&net, &scaled, &q, &ds.x).unwrap();
            let w = ph.matvec_transa(&r[j]).unwrap();
            let theta_hj = &scaled.theta[gl.w_h[j].clone()];
            let base = j * m_h * m_hm1;
            for k in 0..m_h {
                for s in 0..m_hm1 {
                    g2[base + k * m_hm1 + s] = theta_hj[k] * w[k * m_hm1 + s];
                }
            }
        }
        for (a, b) in g1.iter().zip(&g2) {
            assert!((c * a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}
