//! Masked momentum-SGD update rule and learning-rate schedules.

use crate::error::{Error, Result};
use crate::model::{NetworkSpec, ParamVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant(f64),
    /// `scale / sqrt(t + 1)` with `t` counted from the phase start.
    InvSqrt { scale: f64 },
    /// `scale / (t + 1)^{3/4}`: square-summable but not summable, the
    /// schedule shape the stochastic convergence statement asks for.
    InvPow75 { scale: f64 },
    Explicit(Vec<f64>),
}

impl LrSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match self {
            LrSchedule::Constant(c) => *c,
            LrSchedule::InvSqrt { scale } => scale / ((t + 1) as f64).sqrt(),
            LrSchedule::InvPow75 { scale } => scale / ((t + 1) as f64).powf(0.75),
            LrSchedule::Explicit(seq) => seq
                .get(t as usize)
                .copied()
                .or_else(|| seq.last().copied())
                .unwrap_or(0.0),
        }
    }
}

/// Exploitation-phase step size `c / sqrt(t - tau + 1)` for `t >= tau`.
pub fn sgd_exploit_schedule(t: u64, tau: u64, c: f64) -> f64 {
    debug_assert!(t >= tau);
    c / ((t - tau + 1) as f64).sqrt()
}

/// Square-summable variant `c / (t - tau + 1)^{3/4}`.
pub fn sgd_exploit_schedule_sq_summable(t: u64, tau: u64, c: f64) -> f64 {
    debug_assert!(t >= tau);
    c / ((t - tau + 1) as f64).powf(0.75)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Gd,
    Sgd,
}

/// A first-order update rule: `v <- mu v + g; theta <- theta - lr (v +
/// wd * theta)` applied to the masked layers only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptKind,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// 1-based trainable-layer indices receiving updates; `None` = all.
    pub layer_mask: Option<Vec<usize>>,
}

impl OptimizerSpec {
    pub fn gd(lr: LrSchedule, batch_size: usize) -> OptimizerSpec {
        OptimizerSpec {
            kind: OptKind::Gd,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size,
            layer_mask: None,
        }
    }

    pub fn sgd(lr: LrSchedule, momentum: f64, weight_decay: f64, batch_size: usize) -> OptimizerSpec {
        OptimizerSpec {
            kind: OptKind::Sgd,
            lr,
            momentum,
            weight_decay,
            batch_size,
            layer_mask: None,
        }
    }

    pub fn validate(&self, net: &NetworkSpec, n: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Contract {
                op: "OptimizerSpec",
                msg: format!("momentum must lie in [0,1), got {}", self.momentum),
            });
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Contract {
                op: "OptimizerSpec",
                msg: "weight decay must be nonnegative".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Contract {
                op: "OptimizerSpec",
                msg: "batch size must be positive".into(),
            });
        }
        if self.kind == OptKind::Gd && self.batch_size < n {
            return Err(Error::Contract {
                op: "OptimizerSpec",
                msg: format!(
                    "gd requires batch_size >= n ({} < {n})",
                    self.batch_size
                ),
            });
        }
        if let Some(mask) = &self.layer_mask {
            if mask.is_empty() {
                return Err(Error::Contract {
                    op: "OptimizerSpec",
                    msg: "layer mask must be non-empty".into(),
                });
            }
            if mask.iter().any(|&l| l == 0 || l > net.depth()) {
                return Err(Error::Contract {
                    op: "OptimizerSpec",
                    msg: format!("layer mask out of range 1..={}", net.depth()),
                });
            }
        }
        Ok(())
    }

    /// Applies one update in place. Parameters outside the mask are never
    /// touched.
    pub fn apply(&self, state: &mut OptState, params: &mut ParamVector, grad: &[f64], lr: f64) {
        let ranges: Vec<std::ops::Range<usize>> = match &self.layer_mask {
            None => params.layout.layer_ranges.clone(),
            Some(mask) => mask
                .iter()
                .map(|&l| params.layout.layer_ranges[l - 1].clone())
                .collect(),
        };
        for range in ranges {
            for k in range {
                let v = self.momentum * state.velocity[k] + grad[k];
                state.velocity[k] = v;
                params.theta[k] -= lr * (v + self.weight_decay * params.theta[k]);
            }
        }
    }
}

/// Momentum buffer.
pub struct OptState {
    pub velocity: Vec<f64>,
}

impl OptState {
    pub fn new(dim: usize) -> OptState {
        OptState {
            velocity: vec![0.0; dim],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_start_at_scale_and_decrease() {
        assert_eq!(sgd_exploit_schedule(5, 5, 0.3), 0.3);
        assert_eq!(sgd_exploit_schedule_sq_summable(5, 5, 0.3), 0.3);
        let mut prev = f64::INFINITY;
        for t in 5..50 {
            let a = sgd_exploit_schedule(t, 5, 0.3);
            assert!(a <= prev);
            prev = a;
        }
    }

    #[test]
    fn partial_sums_match_direct_summation() {
        let c = 0.7;
        let tau = 3u64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for t in tau..tau + 1000 {
            let a = sgd_exploit_schedule(t, tau, c);
            sum += a;
            sum_sq += a * a;
        }
        let oracle_sum: f64 = (1..=1000).map(|k| c / (k as f64).sqrt()).sum();
        let oracle_sq: f64 = (1..=1000).map(|k| c * c / k as f64).sum();
        assert!((sum - oracle_sum).abs() <= 1e-9);
        assert!((sum_sq - oracle_sq).abs() <= 1e-9);
        // The 3/4-power variant has summable squares: bounded by
        // c^2 * zeta(1.5) ~ c^2 * 2.6124.
        let sq75: f64 = (0..100_000)
            .map(|k| {
                let a = sgd_exploit_schedule_sq_summable(tau + k, tau, c);
                a * a
            })
            .sum();
        assert!(sq75 <= c * c * 2.62);
    }

    #[test]
    fn explicit_schedule_clamps_to_last_value() {
        let s = LrSchedule::Explicit(vec![0.5, 0.25]);
        assert_eq!(s.at(0), 0.5);
        assert_eq!(s.at(1), 0.25);
        assert_eq!(s.at(100), 0.25);
    }
}
