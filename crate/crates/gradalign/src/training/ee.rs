//! The exploration-exploitation wrapper.
//!
//! Phase one trains all layers of the gated network with live gates for
//! `tau - 1` update steps. The switch point is then
//! `theta^tau = theta^{tau-1} + epsilon * delta` with `delta` standard
//! normal over all coordinates, the gates are frozen at `theta^tau`, and
//! phase two updates only the penultimate layer, whose objective is convex
//! under frozen gates.

use super::{
    record_step, rng_state_of, train_error, DiagConfig, OptState, OptimizerSpec, Phase,
    StepMeter, TrainResult, TrainSummary, TrainTrace, DIVERGENCE_LOSS_CAP,
};
use crate::data::Dataset;
use crate::diagnostics::lhat;
use crate::error::{Error, Result};
use crate::losses::mean_loss;
use crate::model::{forward, loss_gradient, GateState, NetworkSpec, ParamVector};
use crate::rng::{self, Stream};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploitLrMode {
    /// Use the exploit optimizer's own schedule.
    Manual,
    /// Constant step `1 / Lhat` from the exact smoothness constant of the
    /// frozen-gate objective.
    OneOverLhat,
}

#[derive(Clone, Debug)]
pub struct EEConfig {
    /// Switch step (in outer-loop units).
    pub tau: u64,
    /// Scale of the Gaussian perturbation at the switch.
    pub epsilon: f64,
    /// Exploration optimizer (all layers).
    pub explore: OptimizerSpec,
    /// Exploitation optimizer; its layer mask is forced to the penultimate
    /// layer.
    pub exploit: OptimizerSpec,
    pub exploit_lr_mode: ExploitLrMode,
}

impl EEConfig {
    pub fn validate(&self, net: &NetworkSpec, n: usize, steps_total: u64) -> Result<()> {
        if !net.is_gated() {
            return Err(Error::Contract {
                op: "EEConfig",
                msg: "wrapper requires a gated head".into(),
            });
        }
        if self.tau < 1 {
            return Err(Error::Contract {
                op: "EEConfig",
                msg: "tau must be at least 1".into(),
            });
        }
        if steps_total <= self.tau {
            return Err(Error::Contract {
                op: "EEConfig",
                msg: format!(
                    "steps_total ({steps_total}) must exceed tau ({})",
                    self.tau
                ),
            });
        }
        if self.epsilon < 0.0 {
            return Err(Error::Contract {
                op: "EEConfig",
                msg: "epsilon must be nonnegative".into(),
            });
        }
        self.explore.validate(net, n)?;
        self.exploit.validate(net, n)?;
        Ok(())
    }
}

/// Runs the wrapper for `steps_total` outer steps. Step `t` of the trace
/// records the state `theta^t`; updates happen between records. The step
/// `tau - 1` performs no gradient update (the switch-point perturbation
/// defines `theta^tau` from `theta^{tau-1}`), matching the wrapper's
/// definition.
pub fn ee_train(
    net: &NetworkSpec,
    params0: &ParamVector,
    ds: &Dataset,
    config: &EEConfig,
    steps_total: u64,
    diag: &DiagConfig,
    seed: u64,
) -> Result<TrainResult> {
    config.validate(net, ds.len(), steps_total)?;
    let mut params = params0.clone();
    let mut gates = GateState::live();
    let mut trace = TrainTrace::new(Some(config.tau));
    let mut meter = StepMeter::new();
    let mut batch_rng = rng::stream(seed, Stream::Batch);
    let mut perturb_rng = rng::stream(seed, Stream::Perturb);
    let n = ds.len();
    let mut diverged = None;
    let mut l_hat = None;
    let mut b_best: Option<(f64, Vec<f64>)> = None; // (best loss, theta_{H-1} at best)
    let mut theta_pen_tau: Option<Vec<f64>> = None;
    let pen_range = params.layout.layer_ranges[net.depth() - 2].clone();

    let mut explore_state = OptState::new(params.dim());
    let mut exploit_state = OptState::new(params.dim());
    let mut exploit_spec = config.exploit.clone();
    exploit_spec.layer_mask = Some(vec![net.depth() - 1]);

    for t in 0..steps_total {
        let exploit_phase = t >= config.tau;
        // Switch-point actions happen before the step-tau record so the
        // record reflects the perturbed, frozen state.
        if t == config.tau {
            let delta = rng::normal_vec(&mut perturb_rng, params.dim());
            for (p, dv) in params.theta.iter_mut().zip(&delta) {
                *p += config.epsilon * dv;
            }
            gates = GateState::freeze(net, &params)?;
            theta_pen_tau = Some(params.theta[pen_range.clone()].to_vec());
            let (l, _z) = lhat(net, &params, &gates, ds)?;
            l_hat = Some(l);
            if config.exploit_lr_mode == ExploitLrMode::OneOverLhat {
                if !(l > 0.0) {
                    return Err(Error::Contract {
                        op: "ee_train",
                        msg: format!("cannot set step size 1/Lhat with Lhat = {l}"),
                    });
                }
                exploit_spec.lr = super::LrSchedule::Constant(1.0 / l);
            }
        }

        let metrics = (|| -> Result<(f64, f64, f64, Vec<f64>)> {
            let out = forward(net, &params, &gates, &ds.x)?;
            let loss = mean_loss(ds.kind, &out, &ds.y)?;
            let err = train_error(ds.kind, &out, &ds.y);
            let grad = loss_gradient(net, &params, &gates, &ds.x, &ds.y, ds.kind, None)?;
            let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok((loss, err, gnorm, grad))
        })();
        let (loss, err, gnorm, grad) = match metrics {
            Ok(v) => v,
            Err(Error::NumericOverflow { .. }) => {
                diverged = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > DIVERGENCE_LOSS_CAP {
            diverged = Some(t);
            break;
        }
        let spec_now = if exploit_phase {
            &exploit_spec
        } else {
            &config.explore
        };
        if spec_now.batch_size >= n {
            meter.update_l_emp(&grad, &params.theta);
        }
        if exploit_phase {
            let better = b_best.as_ref().map_or(true, |(bl, _)| loss < *bl);
            if better {
                b_best = Some((loss, params.theta[pen_range.clone()].to_vec()));
            }
        }
        let rng_state = rng_state_of(seed, &batch_rng, &perturb_rng);
        record_step(
            net,
            &params,
            &gates,
            ds,
            diag,
            &mut meter,
            &mut trace,
            t,
            if exploit_phase {
                Phase::Exploit
            } else {
                Phase::Explore
            },
            loss,
            gnorm,
            err,
            &rng_state,
        )?;

        // The last exploration step carries no update: the perturbation at
        // t = tau defines the next state.
        if !exploit_phase && t + 1 == config.tau {
            continue;
        }
        let (state, lr) = if exploit_phase {
            (&mut exploit_state, exploit_spec.lr.at(t - config.tau))
        } else {
            (&mut explore_state, config.explore.lr.at(t))
        };
        if spec_now.batch_size >= n {
            spec_now.apply(state, &mut params, &grad, lr);
        } else {
            let order = rng::shuffled_indices(&mut batch_rng, n);
            for chunk in order.chunks(spec_now.batch_size) {
                let g =
                    match loss_gradient(net, &params, &gates, &ds.x, &ds.y, ds.kind, Some(chunk)) {
                        Ok(g) => g,
                        Err(Error::NumericOverflow { .. }) => {
                            diverged = Some(t);
                            break;
                        }
                        Err(e) => return Err(e),
                    };
                spec_now.apply(state, &mut params, &g, lr);
            }
            if diverged.is_some() {
                break;
            }
        }
        if params.theta.iter().any(|v| !v.is_finite()) {
            diverged = Some(t);
            break;
        }
    }

    let b_to_best = match (&theta_pen_tau, &b_best) {
        (Some(at_tau), Some((_, at_best))) => Some(
            at_tau
                .iter()
                .zip(at_best)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        ),
        _ => None,
    };
    trace.summary = TrainSummary {
        steps: trace.records.len() as u64,
        final_loss: trace.records.last().map_or(f64::NAN, |r| r.loss),
        final_train_error: trace.records.last().map_or(f64::NAN, |r| r.train_error),
        l_emp: meter.l_emp,
        l_hat,
        b_to_best,
        tau: Some(config.tau),
        q_final: meter.q_count,
    };
    Ok(TrainResult {
        params,
        gates,
        trace,
        diverged,
    })
}
