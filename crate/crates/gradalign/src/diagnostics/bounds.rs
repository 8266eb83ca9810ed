//! Optimality-gap bound reports.
//!
//! For a set of aligned steps `T` and a margin scale `eta`, the bound reads
//!
//! `min_{t in T} loss(theta^t) <= reference(eta)
//!     + sqrt(L * zeta_eta * loss(theta^{t0}) / (2 alpha (1 - alpha))) / sqrt(|T|)`
//!
//! with `zeta_eta = 4 max_{t in T} max(||nu(theta^t)||^2, ||beta(theta^t, eta)||^2)`,
//! `t0 = min T`, `alpha` the normalized step size, and `L` the smoothness
//! constant in force. Because `beta(theta, eta) = eta * J^+ vec(Y*)`, a
//! per-step record of `||nu||^2` and of the eta-independent base norm
//! `||J^+ vec(Y*)||^2` is enough to evaluate the report for every `eta`.

use crate::error::{Error, Result};
use serde::Serialize;

/// Per-step scalars feeding the bound; produced live during training or by
/// recomputation from checkpoints.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoundSample {
    pub step: u64,
    pub loss: f64,
    pub aligned: bool,
    /// `||nu(theta)||^2`: squared norm of the structure-set parameters.
    pub nu_norm_sq: f64,
    /// `||J^+ vec(Y*)||^2` (the eta = 1 coefficient norm, squared).
    pub beta_base_norm_sq: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub eta: f64,
    /// `reference = mean loss of eta * Y*` against the targets.
    pub reference: f64,
    pub zeta_eta: f64,
    pub l_used: f64,
    pub alpha: f64,
    pub alignment_steps: Vec<u64>,
    /// `min_{t in T} loss(theta^t)`.
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// False when no aligned step exists; `holds` is then meaningless.
    pub applicable: bool,
}

/// Evaluates the bound over all aligned samples in `samples`.
pub fn bound_check(
    samples: &[BoundSample],
    reference: f64,
    eta: f64,
    alpha: f64,
    l_used: f64,
) -> Result<BoundReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract {
            op: "bound_check",
            msg: format!("alpha must lie in (0,1), got {alpha}"),
        });
    }
    if !(l_used > 0.0) {
        return Err(Error::Contract {
            op: "bound_check",
            msg: format!("l_used must be positive, got {l_used}"),
        });
    }
    let aligned: Vec<&BoundSample> = samples.iter().filter(|s| s.aligned).collect();
    if aligned.is_empty() {
        return Ok(BoundReport {
            eta,
            reference,
            zeta_eta: f64::NAN,
            l_used,
            alpha,
            alignment_steps: Vec::new(),
            lhs: f64::NAN,
            rhs: f64::NAN,
            holds: false,
            applicable: false,
        });
    }
    let loss_t0 = aligned[0].loss;
    let cardinality = aligned.len() as f64;
    let mut zeta: f64 = 0.0;
    let mut lhs = f64::INFINITY;
    let mut steps = Vec::with_capacity(aligned.len());
    for s in &aligned {
        let b = eta * eta * s.beta_base_norm_sq;
        zeta = zeta.max(4.0 * s.nu_norm_sq.max(b));
        lhs = lhs.min(s.loss);
        steps.push(s.step);
    }
    let rhs = reference
        + (l_used * zeta * loss_t0 / (2.0 * alpha * (1.0 - alpha))).sqrt() / cardinality.sqrt();
    Ok(BoundReport {
        eta,
        reference,
        zeta_eta: zeta,
        l_used,
        alpha,
        alignment_steps: steps,
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9 * (1.0 + rhs.abs()),
        applicable: true,
    })
}

/// One report per prefix of the aligned subsequence (prefix `k` uses the
/// first `k` aligned samples).
pub fn bound_check_prefixes(
    samples: &[BoundSample],
    reference: f64,
    eta: f64,
    alpha: f64,
    l_used: f64,
) -> Result<Vec<BoundReport>> {
    let aligned_positions: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.aligned)
        .map(|(i, _)| i)
        .collect();
    let mut out = Vec::with_capacity(aligned_positions.len());
    for k in 1..=aligned_positions.len() {
        let upto = aligned_positions[k - 1] + 1;
        out.push(bound_check(&samples[..upto], reference, eta, alpha, l_used)?);
    }
    Ok(out)
}
