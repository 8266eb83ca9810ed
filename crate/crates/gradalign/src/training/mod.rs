//! Optimizers, plain training, and the exploration-exploitation wrapper.

mod ee;
mod optimizer;
mod trace;

pub use ee::{ee_train, EEConfig, ExploitLrMode};
pub use optimizer::{
    sgd_exploit_schedule, sgd_exploit_schedule_sq_summable, LrSchedule, OptKind, OptState,
    OptimizerSpec,
};
pub use trace::{Phase, StepRecord, TrainSummary, TrainTrace};

use crate::data::Dataset;
use crate::diagnostics::{alignment_outcome, gram, gram_drift, BoundSample};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{mean_loss, LossKind};
use crate::model::{
    forward, loss_gradient, nu_vector, save_checkpoint, Checkpoint, GateState, NetworkSpec,
    ParamVector, RngState,
};
use crate::rng::{self, Stream};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

/// Loss ceiling beyond which a run is declared divergent.
pub const DIVERGENCE_LOSS_CAP: f64 = 1e12;

/// What to compute at sampled steps.
#[derive(Clone, Debug)]
pub struct DiagConfig {
    /// Sampling stride in steps; 0 disables all sampled diagnostics.
    pub stride: usize,
    pub alignment: bool,
    pub tol: f64,
    /// Track `||M(theta^t) - M(theta^0)||_F^2` at sampled steps.
    pub drift: bool,
    /// Record the per-step scalars feeding the optimality-gap bound.
    pub bound_scalars: bool,
    /// Checkpoint stride in steps; 0 disables.
    pub checkpoint_stride: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl DiagConfig {
    pub fn disabled() -> DiagConfig {
        DiagConfig {
            stride: 0,
            alignment: false,
            tol: crate::diagnostics::DEFAULT_ALIGNMENT_TOL,
            drift: false,
            bound_scalars: false,
            checkpoint_stride: 0,
            checkpoint_dir: None,
        }
    }

    /// Alignment at every step for small datasets, every 10th step
    /// otherwise.
    pub fn default_for(n: usize) -> DiagConfig {
        DiagConfig {
            stride: if n <= 200 { 1 } else { 10 },
            alignment: true,
            ..DiagConfig::disabled()
        }
    }

    fn sampled(&self, t: u64) -> bool {
        self.stride > 0 && t % self.stride as u64 == 0
    }
}

/// Completed run: final parameters, the trace, and — when the run tripped
/// the divergence guard — the step at which it did (the trace then covers
/// the steps up to that point).
#[derive(Debug)]
pub struct TrainResult {
    pub params: ParamVector,
    pub gates: GateState,
    pub trace: TrainTrace,
    pub diverged: Option<u64>,
}

/// Fraction of misclassified training samples under the conventional
/// decision rule of each loss: logit sign for binary CE (0/1 targets),
/// argmax for multiclass CE, and a 0.5 threshold per coordinate for the
/// squared loss on 0/1-coded targets.
pub fn train_error(kind: LossKind, preds: &Matrix, y: &Matrix) -> f64 {
    let n = preds.rows();
    let mut wrong = 0usize;
    for i in 0..n {
        let p = preds.row(i);
        let t = y.row(i);
        let bad = match kind {
            LossKind::BinaryCe => p
                .iter()
                .zip(t)
                .any(|(&q, &yv)| (q > 0.0) != (yv == 1.0)),
            LossKind::MulticlassCe => {
                let am = |v: &[f64]| {
                    v.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap()
                };
                am(p) != am(t)
            }
            LossKind::Squared => p
                .iter()
                .zip(t)
                .any(|(&q, &yv)| (q > 0.5) != (yv > 0.5)),
        };
        if bad {
            wrong += 1;
        }
    }
    wrong as f64 / n as f64
}

/// Shared per-step bookkeeping for both training entry points.
pub(crate) struct StepMeter {
    pub gram0: Option<Matrix>,
    pub prev_grad: Option<Vec<f64>>,
    pub prev_theta: Option<Vec<f64>>,
    pub l_emp: Option<f64>,
    pub q_count: u64,
}

impl StepMeter {
    pub fn new() -> StepMeter {
        StepMeter {
            gram0: None,
            prev_grad: None,
            prev_theta: None,
            l_emp: None,
            q_count: 0,
        }
    }

    /// Updates the running empirical smoothness estimate
    /// `max ||g^{t+1} - g^t|| / ||theta^{t+1} - theta^t||` (full-batch runs).
    pub fn update_l_emp(&mut self, grad: &[f64], theta: &[f64]) {
        if let (Some(pg), Some(pt)) = (&self.prev_grad, &self.prev_theta) {
            let mut dg = 0.0;
            let mut dt = 0.0;
            for k in 0..grad.len() {
                let a = grad[k] - pg[k];
                dg += a * a;
                let b = theta[k] - pt[k];
                dt += b * b;
            }
            if dt > 0.0 {
                let ratio = (dg / dt).sqrt();
                self.l_emp = Some(self.l_emp.map_or(ratio, |v| v.max(ratio)));
            }
        }
        self.prev_grad = Some(grad.to_vec());
        self.prev_theta = Some(theta.to_vec());
    }
}

/// Runs the sampled diagnostics at one step and produces the record.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_step(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    ds: &Dataset,
    diag: &DiagConfig,
    meter: &mut StepMeter,
    trace: &mut TrainTrace,
    t: u64,
    phase: Phase,
    loss: f64,
    grad_norm: f64,
    err: f64,
    rng_state: &RngState,
) -> Result<()> {
    let mut rec = StepRecord {
        step: t,
        phase,
        loss,
        grad_norm,
        train_error: err,
        aligned: None,
        rel_residual: None,
        q_t: None,
        drift: None,
    };
    if diag.sampled(t) {
        if diag.alignment {
            let outcome = alignment_outcome(net, params, gates, ds, diag.tol, t)?;
            rec.aligned = Some(outcome.record.aligned);
            rec.rel_residual = Some(outcome.record.rel_residual);
            if !outcome.record.aligned {
                meter.q_count += 1;
            }
            rec.q_t = Some(meter.q_count);
            if diag.bound_scalars {
                let nu = nu_vector(params);
                let nu_sq: f64 = nu.iter().map(|v| v * v).sum();
                let beta = outcome.beta_base_norm.unwrap_or(f64::NAN);
                trace.bound_samples.push(BoundSample {
                    step: t,
                    loss,
                    aligned: outcome.record.aligned,
                    nu_norm_sq: nu_sq,
                    beta_base_norm_sq: beta * beta,
                });
            }
        }
        if diag.drift {
            let m = gram(net, params, gates, &ds.x)?;
            match &meter.gram0 {
                None => {
                    rec.drift = Some(0.0);
                    meter.gram0 = Some(m);
                }
                Some(g0) => rec.drift = Some(gram_drift(g0, &m)?),
            }
        }
        if diag.checkpoint_stride > 0
            && t % diag.checkpoint_stride as u64 == 0
            && diag.checkpoint_dir.is_some()
        {
            let dir = diag.checkpoint_dir.as_ref().unwrap();
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let path = dir.join(format!("step_{t:08}.json"));
            save_checkpoint(
                &path,
                &Checkpoint {
                    spec: net.clone(),
                    theta: params.theta.clone(),
                    gates: gates.clone(),
                    rng_state: rng_state.clone(),
                    step: t,
                },
            )?;
        }
    }
    trace.records.push(rec);
    Ok(())
}

pub(crate) fn rng_state_of(seed: u64, batch: &ChaCha8Rng, perturb: &ChaCha8Rng) -> RngState {
    RngState {
        seed,
        batch_word_pos: batch.get_word_pos(),
        perturb_word_pos: perturb.get_word_pos(),
    }
}

fn params_finite(params: &ParamVector) -> bool {
    params.theta.iter().all(|v| v.is_finite())
}

/// Trains all layers of the network for `steps` outer steps (one outer step
/// is one pass over the epoch's mini-batches; with `batch_size >= n` this is
/// full-batch gradient descent, one update per step).
pub fn train_plain(
    net: &NetworkSpec,
    params0: &ParamVector,
    gates: &GateState,
    ds: &Dataset,
    optimizer: &OptimizerSpec,
    steps: u64,
    diag: &DiagConfig,
    seed: u64,
) -> Result<TrainResult> {
    optimizer.validate(net, ds.len())?;
    let mut params = params0.clone();
    let mut state = OptState::new(params.dim());
    let mut trace = TrainTrace::new(None);
    let mut meter = StepMeter::new();
    let mut batch_rng = rng::stream(seed, Stream::Batch);
    let perturb_rng = rng::stream(seed, Stream::Perturb);

    let n = ds.len();
    let full_batch = optimizer.batch_size >= n;
    let mut diverged = None;

    for t in 0..steps {
        let step_outcome = (|| -> Result<(f64, f64, f64, Vec<f64>)> {
            let out = forward(net, &params, gates, &ds.x)?;
            let loss = mean_loss(ds.kind, &out, &ds.y)?;
            let err = train_error(ds.kind, &out, &ds.y);
            let grad = loss_gradient(net, &params, gates, &ds.x, &ds.y, ds.kind, None)?;
            let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok((loss, err, gnorm, grad))
        })();
        let (loss, err, gnorm, grad) = match step_outcome {
            Ok(v) => v,
            Err(Error::NumericOverflow { .. }) => {
                diverged = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > DIVERGENCE_LOSS_CAP || !params_finite(&params) {
            diverged = Some(t);
            break;
        }
        if full_batch {
            meter.update_l_emp(&grad, &params.theta);
        }
        let rng_state = rng_state_of(seed, &batch_rng, &perturb_rng);
        record_step(
            net, &params, gates, ds, diag, &mut meter, &mut trace, t, Phase::Explore, loss,
            gnorm, err, &rng_state,
        )?;

        let lr = optimizer.lr.at(t);
        if full_batch {
            optimizer.apply(&mut state, &mut params, &grad, lr);
        } else {
            let order = rng::shuffled_indices(&mut batch_rng, n);
            for chunk in order.chunks(optimizer.batch_size) {
                let g = match loss_gradient(net, &params, gates, &ds.x, &ds.y, ds.kind, Some(chunk))
                {
                    Ok(g) => g,
                    Err(Error::NumericOverflow { .. }) => {
                        diverged = Some(t);
                        break;
                    }
                    Err(e) => return Err(e),
                };
                optimizer.apply(&mut state, &mut params, &g, lr);
            }
            if diverged.is_some() {
                break;
            }
        }
    }

    trace.summary = TrainSummary {
        steps: trace.records.len() as u64,
        final_loss: trace.records.last().map_or(f64::NAN, |r| r.loss),
        final_train_error: trace.records.last().map_or(f64::NAN, |r| r.train_error),
        l_emp: meter.l_emp,
        l_hat: None,
        b_to_best: None,
        tau: None,
        q_final: meter.q_count,
    };
    Ok(TrainResult {
        params,
        gates: gates.clone(),
        trace,
        diverged,
    })
}
