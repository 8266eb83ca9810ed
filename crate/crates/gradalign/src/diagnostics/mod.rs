//! Certificates and bound checks.
//!
//! Alignment of the modified target with the Jacobian column space, the
//! misalignment counter, the Gram matrix of the gradient representation and
//! its drift, the gated-head feature matrix and its rank certificate, the
//! optimality-gap bound report, the exact smoothness constant of the
//! exploitation objective, and the necessity check for global optimality.

mod bounds;
mod phi;

pub use bounds::{bound_check, bound_check_prefixes, BoundReport, BoundSample};
pub use phi::{
    exploitation_grad_closed_form, head_width_rule, lhat, phi, safe_exploration_check,
    scaled_phi_apply, SafeExplorationCertificate,
};

use crate::data::{stack_columns, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{col_membership, lsq_norms, Matrix};
use crate::losses::{loss_grad, mean_loss, LossKind};
use crate::model::{
    forward, jacobian_with_cap, loss_gradient, nu_vector, GateState, NetworkSpec, ParamVector,
    DEFAULT_JACOBIAN_CAP,
};
use serde::Serialize;

/// Default relative-residual tolerance for membership tests.
pub const DEFAULT_ALIGNMENT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    DirectLsq,
    Gram,
}

/// One alignment test at one training step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AlignmentRecord {
    pub step: u64,
    pub aligned: bool,
    pub rel_residual: f64,
    pub method: AlignMethod,
}

/// Alignment outcome plus the minimum-norm coefficient norm
/// `||J^+ vec(Y_ell)||` when the direct path produced it for free.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentOutcome {
    pub record: AlignmentRecord,
    pub beta_base_norm: Option<f64>,
}

/// Tests `vec(Y_ell) in Col(d vec(f_X) / d theta)`.
///
/// Uses direct least squares on the Jacobian when `n*m_y <= d` and the
/// Jacobian fits the materialization cap; otherwise falls back to membership
/// in the column space of the Gram matrix `J J^T`, which spans the same
/// space.
pub fn alignment(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    ds: &Dataset,
    tol: f64,
    step: u64,
) -> Result<AlignmentRecord> {
    Ok(alignment_outcome(net, params, gates, ds, tol, step)?.record)
}

pub fn alignment_outcome(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    ds: &Dataset,
    tol: f64,
    step: u64,
) -> Result<AlignmentOutcome> {
    let n_my = ds.len() * net.output_dim();
    let d = params.layout.dim;
    let y = ds.y_ell_vec();
    let direct = n_my <= d && n_my.saturating_mul(d) <= DEFAULT_JACOBIAN_CAP;
    if direct {
        let jac = jacobian_with_cap(net, params, gates, &ds.x, DEFAULT_JACOBIAN_CAP)?;
        let ynorm = crate::linalg::Matrix::new(y.len(), 1, y.clone())?.frob_norm();
        if ynorm == 0.0 {
            return Ok(AlignmentOutcome {
                record: AlignmentRecord {
                    step,
                    aligned: true,
                    rel_residual: 0.0,
                    method: AlignMethod::DirectLsq,
                },
                beta_base_norm: Some(0.0),
            });
        }
        let norms = lsq_norms(&jac, &y)?;
        let rel_residual = norms.residual_norm / ynorm;
        Ok(AlignmentOutcome {
            record: AlignmentRecord {
                step,
                aligned: rel_residual <= tol,
                rel_residual,
                method: AlignMethod::DirectLsq,
            },
            beta_base_norm: Some(norms.solution_norm),
        })
    } else {
        let m = gram(net, params, gates, &ds.x)?;
        let membership = col_membership(&m, &y, tol)?;
        Ok(AlignmentOutcome {
            record: AlignmentRecord {
                step,
                aligned: membership.member,
                rel_residual: membership.rel_residual,
                method: AlignMethod::Gram,
            },
            beta_base_norm: None,
        })
    }
}

/// Cumulative count of misaligned steps: `Q_T = sum_{t<=T} 1{not aligned}`.
pub fn q_counter(records: &[AlignmentRecord]) -> Vec<u64> {
    let mut out = Vec::with_capacity(records.len());
    let mut q = 0u64;
    for r in records {
        if !r.aligned {
            q += 1;
        }
        out.push(q);
    }
    out
}

/// Gram matrix of the gradient representation, `M = J J^T`, symmetrized.
pub fn gram(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    x: &Matrix,
) -> Result<Matrix> {
    let n_my = x.rows() * net.output_dim();
    if n_my.saturating_mul(n_my) > DEFAULT_JACOBIAN_CAP {
        return Err(Error::SizeExceeded {
            op: "gram",
            required: n_my * n_my,
            cap: DEFAULT_JACOBIAN_CAP,
        });
    }
    let jac = jacobian_with_cap(net, params, gates, x, DEFAULT_JACOBIAN_CAP)?;
    let mut m = jac.matmul_transb(&jac)?;
    // Enforce exact symmetry after the accumulation.
    for i in 0..m.rows() {
        for j in (i + 1)..m.cols() {
            let avg = 0.5 * (m.at(i, j) + m.at(j, i));
            *m.at_mut(i, j) = avg;
            *m.at_mut(j, i) = avg;
        }
    }
    Ok(m)
}

/// Squared Frobenius distance of the current Gram matrix from a reference.
pub fn gram_drift(reference: &Matrix, current: &Matrix) -> Result<f64> {
    if reference.rows() != current.rows() || reference.cols() != current.cols() {
        return Err(Error::ShapeMismatch {
            op: "gram_drift",
            expected: format!("{}x{}", reference.rows(), reference.cols()),
            got: format!("{}x{}", current.rows(), current.cols()),
        });
    }
    let mut acc = 0.0;
    for (a, b) in reference.data().iter().zip(current.data()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc)
}

/// Minimum-norm coefficient mapping the Jacobian onto `eta * vec(Y*)`:
/// `beta = eta * J^+ vec(Y*)`.
pub fn beta_hat(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    x: &Matrix,
    y_star: &Matrix,
    eta: f64,
) -> Result<Vec<f64>> {
    let jac = jacobian_with_cap(net, params, gates, x, DEFAULT_JACOBIAN_CAP)?;
    let y = stack_columns(y_star);
    let (mut beta, _) = crate::linalg::least_squares(&jac, &y)?;
    for b in beta.iter_mut() {
        *b *= eta;
    }
    Ok(beta)
}

/// Result of one evaluation of the first-order gap inequality
/// `loss(theta) <= loss_theta(beta) + ||nu - beta|| * ||grad loss||`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct KeyInequality {
    pub lhs: f64,
    pub rhs: f64,
    pub linearized_loss: f64,
    pub holds: bool,
}

/// Evaluates both sides of the gap inequality at an arbitrary coefficient
/// vector `beta`. The linearized prediction of sample `i` is row `i` of the
/// unstacked `J beta`.
pub fn key_inequality_check(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    ds: &Dataset,
    beta: &[f64],
) -> Result<KeyInequality> {
    let n = ds.len();
    let m_y = net.output_dim();
    let jac = jacobian_with_cap(net, params, gates, &ds.x, DEFAULT_JACOBIAN_CAP)?;
    let jb = jac.matvec(beta)?;
    let mut preds = Matrix::zeros(n, m_y);
    for j in 0..m_y {
        for i in 0..n {
            *preds.at_mut(i, j) = jb[j * n + i];
        }
    }
    let linearized_loss = mean_loss(ds.kind, &preds, &ds.y)?;
    let out = forward(net, params, gates, &ds.x)?;
    let lhs = mean_loss(ds.kind, &out, &ds.y)?;
    let grad = loss_gradient(net, params, gates, &ds.x, &ds.y, ds.kind, None)?;
    let gnorm: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nu = nu_vector(params);
    let dist: f64 = nu
        .iter()
        .zip(beta)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let rhs = linearized_loss + dist * gnorm;
    Ok(KeyInequality {
        lhs,
        rhs,
        linearized_loss,
        holds: lhs <= rhs + 1e-8 * (1.0 + rhs),
    })
}

/// Outcome of the necessity check: a violation would be a state that is
/// misaligned yet arbitrarily close to a globally optimal output pattern
/// `eta * Y_ell`, which the structure property rules out.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct NecessityOutcome {
    pub applicable: bool,
    pub aligned: bool,
    pub eta_star: f64,
    pub min_eta_rel_residual: f64,
    pub violation: bool,
}

pub fn necessity_check(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    ds: &Dataset,
    tol: f64,
) -> Result<NecessityOutcome> {
    let y_norm_sq = ds.y_ell.frob_norm_sq();
    if y_norm_sq == 0.0 {
        return Ok(NecessityOutcome {
            applicable: false,
            aligned: false,
            eta_star: 0.0,
            min_eta_rel_residual: f64::NAN,
            violation: false,
        });
    }
    let rec = alignment(net, params, gates, ds, tol, 0)?;
    let f = forward(net, params, gates, &ds.x)?;
    // Closed-form minimizer of ||f - eta Y_ell||_F over eta.
    let mut inner = 0.0;
    for (a, b) in f.data().iter().zip(ds.y_ell.data()) {
        inner += a * b;
    }
    let eta_star = inner / y_norm_sq;
    let mut res_sq = 0.0;
    for (a, b) in f.data().iter().zip(ds.y_ell.data()) {
        let d = a - eta_star * b;
        res_sq += d * d;
    }
    let min_eta_rel_residual = (res_sq / y_norm_sq).sqrt();
    Ok(NecessityOutcome {
        applicable: true,
        aligned: rec.aligned,
        eta_star,
        min_eta_rel_residual,
        violation: !rec.aligned && min_eta_rel_residual <= tol,
    })
}

/// Mean loss and per-sample gradient seeds at the current parameters;
/// shared helper for report code.
pub fn dataset_loss(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    ds: &Dataset,
) -> Result<f64> {
    let out = forward(net, params, gates, &ds.x)?;
    mean_loss(ds.kind, &out, &ds.y)
}

/// Per-output stacked loss gradients `r_j = (1/n) [d_j loss_i]_i`.
pub(crate) fn stacked_loss_gradients(
    kind: LossKind,
    preds: &Matrix,
    targets: &Matrix,
) -> Result<Vec<Vec<f64>>> {
    let n = preds.rows();
    let m_y = preds.cols();
    let mut r = vec![vec![0.0; n]; m_y];
    for i in 0..n {
        let g = loss_grad(kind, preds.row(i), targets.row(i))?;
        for (j, gv) in g.iter().enumerate() {
            r[j][i] = gv / n as f64;
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_moons;
    use crate::model::{init_params, ParamVector};
    use crate::rng::{normal_vec, stream, Stream};
    use approx::assert_relative_eq;

    fn linear_fixture(n: usize, d: usize, seed: u64) -> (NetworkSpec, ParamVector, Matrix) {
        let net = NetworkSpec::linear(d, 1);
        let params = ParamVector::from_theta(&net, normal_vec(&mut stream(seed, Stream::Init), d))
            .unwrap();
        let x = Matrix::from_raw(n, d, normal_vec(&mut stream(seed + 1, Stream::Data), n * d));
        (net, params, x)
    }

    #[test]
    fn linear_model_alignment_iff_target_in_feature_span() {
        // f = X theta, so the Jacobian is X and alignment is membership of
        // Y_ell in Col(X).
        let (net, params, x) = linear_fixture(8, 3, 1);
        let v = [0.5, -1.0, 0.25];
        let yv = x.matvec(&v).unwrap();
        let y = Matrix::new(8, 1, yv).unwrap();
        let ds = Dataset::new(x.clone(), y, LossKind::Squared, "fix", 0).unwrap();
        let rec = alignment(&net, &params, &GateState::live(), &ds, 1e-6, 0).unwrap();
        assert!(rec.aligned);
        // n*m_y = 8 > d = 3, so the membership ran through the Gram matrix.
        assert_eq!(rec.method, AlignMethod::Gram);

        // A target far outside the 3-dimensional span cannot be aligned.
        let mut ybad = vec![0.0; 8];
        ybad[0] = 1.0;
        // Project out the span to build a certificate of misalignment.
        let ds_bad = Dataset::new(
            ds.x.clone(),
            Matrix::new(8, 1, ybad).unwrap(),
            LossKind::Squared,
            "fix",
            0,
        )
        .unwrap();
        let rec = alignment(&net, &params, &GateState::live(), &ds_bad, 1e-6, 1).unwrap();
        // Generic random 8x3 X: e1 is almost surely not in the span.
        assert!(!rec.aligned);

        // Overparameterized fixture takes the direct least-squares path.
        let (net_w, params_w, x_w) = linear_fixture(4, 9, 2);
        let vw: Vec<f64> = (0..9).map(|k| 0.1 * k as f64 - 0.3).collect();
        let yw = Matrix::new(4, 1, x_w.matvec(&vw).unwrap()).unwrap();
        let ds_w = Dataset::new(x_w, yw, LossKind::Squared, "wide", 0).unwrap();
        let rec = alignment(&net_w, &params_w, &GateState::live(), &ds_w, 1e-6, 0).unwrap();
        assert!(rec.aligned);
        assert_eq!(rec.method, AlignMethod::DirectLsq);
    }

    #[test]
    fn gram_and_direct_membership_agree() {
        let net = NetworkSpec::mlp(vec![2, 6, 1], 10.0).unwrap();
        let params = init_params(&net, &mut stream(3, Stream::Init));
        let ds = gen_two_moons(12, 0.0, 3).unwrap();
        let direct = alignment(&net, &params, &GateState::live(), &ds, 1e-6, 0).unwrap();
        // Force the gram path by testing membership on M directly.
        let m = gram(&net, &params, &GateState::live(), &ds.x).unwrap();
        let mem = col_membership(&m, &ds.y_ell_vec(), 1e-6).unwrap();
        assert_eq!(direct.aligned, mem.member);
        if direct.rel_residual > 1e-9 {
            assert!(
                (direct.rel_residual - mem.rel_residual).abs()
                    <= 1e-6 * (1.0 + direct.rel_residual)
            );
        }
    }

    #[test]
    fn gram_is_psd_and_linear_case_exact() {
        // Single sample, linear model: M = ||x||^2 (1x1).
        let (net, params, _) = linear_fixture(1, 3, 5);
        let x = Matrix::from_rows(&[vec![1.0, 2.0, -2.0]]).unwrap();
        let m = gram(&net, &params, &GateState::live(), &x).unwrap();
        assert_eq!(m.rows(), 1);
        assert_relative_eq!(m.at(0, 0), 9.0, epsilon = 1e-12);

        let net = NetworkSpec::mlp(vec![2, 5, 2], 10.0).unwrap();
        let params = init_params(&net, &mut stream(6, Stream::Init));
        let x = Matrix::from_raw(4, 2, normal_vec(&mut stream(7, Stream::Data), 8));
        let m = gram(&net, &params, &GateState::live(), &x).unwrap();
        // Symmetric.
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                assert_eq!(m.at(i, j), m.at(j, i));
            }
        }
        // PSD: x^T M x >= -1e-8 * trace for random probes.
        let trace: f64 = (0..m.rows()).map(|i| m.at(i, i)).sum();
        let mut rng = stream(8, Stream::Probe);
        for _ in 0..20 {
            let v = normal_vec(&mut rng, m.rows());
            let mv = m.matvec(&v).unwrap();
            let q: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
            assert!(q >= -1e-8 * trace);
        }
    }

    #[test]
    fn q_counter_examples() {
        let mk = |aligned: Vec<bool>| -> Vec<AlignmentRecord> {
            aligned
                .into_iter()
                .enumerate()
                .map(|(i, a)| AlignmentRecord {
                    step: i as u64,
                    aligned: a,
                    rel_residual: 0.0,
                    method: AlignMethod::DirectLsq,
                })
                .collect()
        };
        assert_eq!(q_counter(&mk(vec![true; 5])), vec![0; 5]);
        assert_eq!(q_counter(&mk(vec![false; 4])), vec![1, 2, 3, 4]);
        // Alternating starting misaligned: ceil((T+1)/2).
        assert_eq!(
            q_counter(&mk(vec![false, true, false, true, false])),
            vec![1, 1, 2, 2, 3]
        );
    }

    #[test]
    fn beta_hat_identity_and_scaling() {
        // J = I for a linear model on the identity input batch.
        let (net, params, _) = linear_fixture(3, 3, 9);
        let x = Matrix::identity(3);
        let y_star = Matrix::new(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let b = beta_hat(&net, &params, &GateState::live(), &x, &y_star, 2.0).unwrap();
        assert_relative_eq!(b[0], 2.0, epsilon = 1e-10);
        assert_relative_eq!(b[1], -4.0, epsilon = 1e-10);
        assert_relative_eq!(b[2], 1.0, epsilon = 1e-10);
        let b0 = beta_hat(&net, &params, &GateState::live(), &x, &y_star, 0.0).unwrap();
        assert!(b0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_hat_reproduces_targets_inside_column_space() {
        let net = NetworkSpec::mlp(vec![2, 7, 1], 10.0).unwrap();
        let params = init_params(&net, &mut stream(10, Stream::Init));
        let x = Matrix::from_raw(5, 2, normal_vec(&mut stream(11, Stream::Data), 10));
        // Build Y* inside Col(J) by projecting a probe through J.
        let jac = crate::model::jacobian(&net, &params, &GateState::live(), &x).unwrap();
        let probe = normal_vec(&mut stream(12, Stream::Probe), jac.cols());
        let yv = jac.matvec(&probe).unwrap();
        let y_star = Matrix::new(5, 1, yv.clone()).unwrap();
        let eta = 3.0;
        let b = beta_hat(&net, &params, &GateState::live(), &x, &y_star, eta).unwrap();
        let jb = jac.matvec(&b).unwrap();
        let scale: f64 = yv.iter().map(|v| v * v).sum::<f64>().sqrt() * eta;
        let err: f64 = jb
            .iter()
            .zip(&yv)
            .map(|(a, b)| (a - eta * b) * (a - eta * b))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-8 * scale, "err {err} vs scale {scale}");
    }

    #[test]
    fn key_inequality_equality_at_nu() {
        let net = NetworkSpec::mlp(vec![2, 5, 1], 10.0).unwrap();
        let params = init_params(&net, &mut stream(13, Stream::Init));
        let ds = gen_two_moons(8, 0.0, 2).unwrap().with_kind(LossKind::Squared).unwrap();
        let nu = nu_vector(&params);
        let ki = key_inequality_check(&net, &params, &GateState::live(), &ds, &nu).unwrap();
        // At beta = nu the linearized loss is exactly the loss.
        assert_relative_eq!(ki.linearized_loss, ki.lhs, epsilon = 1e-10);
        assert!(ki.holds);
    }

    #[test]
    fn necessity_never_flags_exact_optimum_as_misaligned() {
        // If f_X = Y_ell exactly, alignment must hold (contrapositive).
        let (net, _, _) = linear_fixture(4, 4, 20);
        // theta chosen so X theta = Y exactly: use X = I.
        let xi = Matrix::identity(4);
        let theta = vec![0.7, -0.3, 0.2, 1.5];
        let params = ParamVector::from_theta(&net, theta.clone()).unwrap();
        let y = Matrix::new(4, 1, theta).unwrap();
        let ds = Dataset::new(xi, y, LossKind::Squared, "exact", 0).unwrap();
        let out = necessity_check(&net, &params, &GateState::live(), &ds, 1e-6).unwrap();
        assert!(out.applicable);
        assert!(out.aligned);
        assert!(!out.violation);
        assert_relative_eq!(out.eta_star, 1.0, epsilon = 1e-10);
        assert!(out.min_eta_rel_residual <= 1e-10);
    }
}
