//! Loss functions and the smoothness facts the bound checks consume.
//!
//! The output nonlinearity (sigmoid / softmax) is folded into the loss, so
//! networks always emit pre-activations; this keeps every model linear in its
//! last-layer parameters. Per-prediction gradient-Lipschitz constants:
//!
//! - squared `||q - y||^2`: Hessian `2 I`, so `L = 2`;
//! - binary cross-entropy per logit `ln(1 + e^q) - y q`: second derivative
//!   `sigma'(q) <= 1/4`, so `L = 1/4`;
//! - softmax cross-entropy `logsumexp(q) - q^T y`: Hessian
//!   `diag(p) - p p^T` with eigenvalues at most `max_i p_i <= 1`, so `L = 1`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    BinaryCe,
    MulticlassCe,
}

impl LossKind {
    /// Gradient-Lipschitz constant of `q -> loss(q, y)`.
    pub fn lipschitz(self) -> f64 {
        match self {
            LossKind::Squared => 2.0,
            LossKind::BinaryCe => 0.25,
            LossKind::MulticlassCe => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Squared => "squared",
            LossKind::BinaryCe => "binary_ce",
            LossKind::MulticlassCe => "multiclass_ce",
        }
    }
}

fn check_targets(kind: LossKind, y: &[f64]) -> Result<()> {
    match kind {
        LossKind::Squared => Ok(()),
        LossKind::BinaryCe => {
            if y.iter().all(|&v| v == 0.0 || v == 1.0) {
                Ok(())
            } else {
                Err(Error::Contract {
                    op: "loss",
                    msg: "binary cross-entropy requires {0,1} targets".into(),
                })
            }
        }
        LossKind::MulticlassCe => {
            let ones = y.iter().filter(|&&v| v == 1.0).count();
            if ones == 1 && y.iter().all(|&v| v == 0.0 || v == 1.0) {
                Ok(())
            } else {
                Err(Error::Contract {
                    op: "loss",
                    msg: "multiclass cross-entropy requires one-hot targets".into(),
                })
            }
        }
    }
}

/// `ln(1 + e^x)`, overflow-safe.
#[inline]
fn ln1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, overflow-safe.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp(q: &[f64]) -> f64 {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + q.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-sample loss value.
pub fn loss_value(kind: LossKind, q: &[f64], y: &[f64]) -> Result<f64> {
    if q.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_value",
            expected: format!("{}", q.len()),
            got: format!("{}", y.len()),
        });
    }
    check_targets(kind, y)?;
    Ok(match kind {
        LossKind::Squared => q.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum(),
        LossKind::BinaryCe => q
            .iter()
            .zip(y)
            .map(|(&qk, &yk)| ln1pexp(qk) - yk * qk)
            .sum(),
        LossKind::MulticlassCe => {
            let lse = logsumexp(q);
            let qy: f64 = q.iter().zip(y).map(|(a, b)| a * b).sum();
            lse - qy
        }
    })
}

/// Per-sample loss gradient in the prediction.
pub fn loss_grad(kind: LossKind, q: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if q.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_grad",
            expected: format!("{}", q.len()),
            got: format!("{}", y.len()),
        });
    }
    check_targets(kind, y)?;
    Ok(match kind {
        LossKind::Squared => q.iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect(),
        LossKind::BinaryCe => q
            .iter()
            .zip(y)
            .map(|(&qk, &yk)| sigmoid(qk) - yk)
            .collect(),
        LossKind::MulticlassCe => {
            let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = q.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().zip(y).map(|(e, yk)| e / z - yk).collect()
        }
    })
}

/// Mean loss of a prediction matrix against a target matrix.
pub fn mean_loss(kind: LossKind, preds: &Matrix, targets: &Matrix) -> Result<f64> {
    if preds.rows() != targets.rows() || preds.cols() != targets.cols() {
        return Err(Error::ShapeMismatch {
            op: "mean_loss",
            expected: format!("{}x{}", preds.rows(), preds.cols()),
            got: format!("{}x{}", targets.rows(), targets.cols()),
        });
    }
    let mut total = 0.0;
    for i in 0..preds.rows() {
        total += loss_value(kind, preds.row(i), targets.row(i))?;
    }
    Ok(total / preds.rows() as f64)
}

/// Target matrix used by the alignment condition: identity for the squared
/// loss, `2Y - 1` for the cross-entropy kinds.
#[derive(Clone, Debug)]
pub struct ModifiedTarget {
    pub y_ell: Matrix,
}

pub fn modified_target(kind: LossKind, y: &Matrix) -> Result<ModifiedTarget> {
    let y_ell = match kind {
        LossKind::Squared => y.clone(),
        LossKind::BinaryCe | LossKind::MulticlassCe => {
            if !y.data().iter().all(|&v| v == 0.0 || v == 1.0) {
                return Err(Error::Contract {
                    op: "modified_target",
                    msg: "cross-entropy targets must be 0/1".into(),
                });
            }
            let data = y.data().iter().map(|&v| 2.0 * v - 1.0).collect();
            Matrix::new(y.rows(), y.cols(), data)?
        }
    };
    Ok(ModifiedTarget { y_ell })
}

/// Mean loss of scaled reference predictions: `(1/n) sum_i loss(eta * y*_i, y_i)`.
pub fn reference_loss(kind: LossKind, y: &Matrix, y_star: &Matrix, eta: f64) -> Result<f64> {
    if y.rows() != y_star.rows() || y.cols() != y_star.cols() {
        return Err(Error::ShapeMismatch {
            op: "reference_loss",
            expected: format!("{}x{}", y.rows(), y.cols()),
            got: format!("{}x{}", y_star.rows(), y_star.cols()),
        });
    }
    let mut total = 0.0;
    let mut scaled = vec![0.0; y.cols()];
    for i in 0..y.rows() {
        for (s, &v) in scaled.iter_mut().zip(y_star.row(i)) {
            *s = eta * v;
        }
        total += loss_value(kind, &scaled, y.row(i))?;
    }
    Ok(total / y.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squared_loss_at_target_is_zero() {
        assert_eq!(
            loss_value(LossKind::Squared, &[0.5, -1.0], &[0.5, -1.0]).unwrap(),
            0.0
        );
    }

    #[test]
    fn multiclass_at_zero_logits_is_ln_k() {
        let q = vec![0.0; 10];
        let mut y = vec![0.0; 10];
        y[3] = 1.0;
        assert_relative_eq!(
            loss_value(LossKind::MulticlassCe, &q, &y).unwrap(),
            (10.0f64).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn binary_ce_scalar_oracle() {
        // Direct evaluation: ln(1 + e^3) - 3.
        let want = (1.0 + 3.0f64.exp()).ln() - 3.0;
        assert_relative_eq!(
            loss_value(LossKind::BinaryCe, &[3.0], &[1.0]).unwrap(),
            want,
            epsilon = 1e-12
        );
        assert_relative_eq!(want, 0.048587, epsilon = 1e-6);
    }

    #[test]
    fn gradients_match_analytic_forms() {
        let g = loss_grad(LossKind::Squared, &[2.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![2.0, -4.0]);
        let g = loss_grad(LossKind::MulticlassCe, &[0.0; 4], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(g[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(g[1], -0.75, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [LossKind::Squared, LossKind::BinaryCe, LossKind::MulticlassCe] {
            for _ in 0..20 {
                let m = 4;
                let q: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let y = match kind {
                    LossKind::Squared => (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    LossKind::BinaryCe => (0..m)
                        .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
                        .collect(),
                    LossKind::MulticlassCe => {
                        let mut y = vec![0.0; m];
                        y[rng.gen_range(0..m)] = 1.0;
                        y
                    }
                };
                let g = loss_grad(kind, &q, &y).unwrap();
                let h = 1e-6;
                for k in 0..m {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[k] += h;
                    qm[k] -= h;
                    let fd = (loss_value(kind, &qp, &y).unwrap()
                        - loss_value(kind, &qm, &y).unwrap())
                        / (2.0 * h);
                    assert!(
                        (g[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                        "{kind:?} coord {k}: {} vs {}",
                        g[k],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn modified_target_rules() {
        let y = Matrix::from_rows(&[vec![0.3]]).unwrap();
        let t = modified_target(LossKind::Squared, &y).unwrap();
        assert_eq!(t.y_ell.at(0, 0), 0.3);

        let y = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let t = modified_target(LossKind::MulticlassCe, &y).unwrap();
        assert_eq!(t.y_ell.row(0), &[1.0, -1.0]);

        let y = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let t = modified_target(LossKind::BinaryCe, &y).unwrap();
        assert_eq!(t.y_ell.row(0), &[-1.0, -1.0, -1.0]);

        let bad = Matrix::from_rows(&[vec![0.5]]).unwrap();
        assert!(modified_target(LossKind::BinaryCe, &bad).is_err());
    }

    #[test]
    fn reference_loss_examples() {
        let y = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        // Squared with Y* = Y and eta = 1 is exactly zero.
        assert_eq!(reference_loss(LossKind::Squared, &y, &y, 1.0).unwrap(), 0.0);

        // Binary CE with signed targets: ln(1 + e^{-10}).
        let y1 = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let ys = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let got = reference_loss(LossKind::BinaryCe, &y1, &ys, 10.0).unwrap();
        assert_relative_eq!(got, (-10.0f64).exp().ln_1p(), epsilon = 1e-14);
        assert!((got - 4.54e-5).abs() < 1e-6);

        // Strictly decreasing in the margin scale.
        let y_ell = modified_target(LossKind::BinaryCe, &y).unwrap().y_ell;
        let mut prev = f64::INFINITY;
        for eta in [1.0, 5.0, 10.0, 20.0] {
            let v = reference_loss(LossKind::BinaryCe, &y, &y_ell, eta).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn losses_are_nonnegative_and_convex_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for kind in [LossKind::Squared, LossKind::BinaryCe, LossKind::MulticlassCe] {
            for _ in 0..50 {
                let m = 3;
                let y = match kind {
                    LossKind::Squared => (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    LossKind::BinaryCe => (0..m)
                        .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
                        .collect::<Vec<f64>>(),
                    LossKind::MulticlassCe => {
                        let mut y = vec![0.0; m];
                        y[rng.gen_range(0..m)] = 1.0;
                        y
                    }
                };
                let q1: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let q2: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let lam: f64 = rng.gen_range(0.0..1.0);
                let qm: Vec<f64> = q1
                    .iter()
                    .zip(&q2)
                    .map(|(a, b)| lam * a + (1.0 - lam) * b)
                    .collect();
                let l1 = loss_value(kind, &q1, &y).unwrap();
                let l2 = loss_value(kind, &q2, &y).unwrap();
                let lm = loss_value(kind, &qm, &y).unwrap();
                assert!(l1 >= 0.0 && l2 >= 0.0 && lm >= 0.0);
                assert!(lm <= lam * l1 + (1.0 - lam) * l2 + 1e-10);
            }
        }
    }

    #[test]
    fn gradient_difference_quotients_respect_lipschitz_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for kind in [LossKind::Squared, LossKind::BinaryCe, LossKind::MulticlassCe] {
            let l = kind.lipschitz();
            for _ in 0..100 {
                let m = 3;
                let y = match kind {
                    LossKind::Squared => (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    LossKind::BinaryCe => (0..m)
                        .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
                        .collect::<Vec<f64>>(),
                    LossKind::MulticlassCe => {
                        let mut y = vec![0.0; m];
                        y[rng.gen_range(0..m)] = 1.0;
                        y
                    }
                };
                let q1: Vec<f64> = (0..m).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let q2: Vec<f64> = (0..m).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let g1 = loss_grad(kind, &q1, &y).unwrap();
                let g2 = loss_grad(kind, &q2, &y).unwrap();
                let dg: f64 = g1
                    .iter()
                    .zip(&g2)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let dq: f64 = q1
                    .iter()
                    .zip(&q2)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dg <= l * dq * (1.0 + 1e-8), "{kind:?}: {dg} > {l} * {dq}");
            }
        }
    }
}
