//! Experiment execution: per-seed training runs with trace, checkpoint,
//! bound-sample, and summary artifacts.

use crate::config::ExperimentConfig;
use gradalign::data::{save_csv, DatasetMeta};
use gradalign::error::{Error, Result};
use gradalign::model::{init_params, GateState};
use gradalign::rng::{stream, Stream};
use gradalign::training::{ee_train, train_plain, TrainResult};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Serialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub steps: u64,
    pub final_loss: f64,
    pub final_train_error: f64,
    pub q_final: u64,
    /// Last few sampled misalignment counts, step-tagged.
    pub q_tail: Vec<(u64, u64)>,
    pub drift_final: Option<f64>,
    pub l_emp: Option<f64>,
    pub l_hat: Option<f64>,
    pub b_to_best: Option<f64>,
    pub tau: Option<u64>,
    pub diverged: Option<u64>,
    pub wall_time_secs: f64,
}

pub struct SeedOutcome {
    pub summary: RunSummary,
    pub dir: PathBuf,
}

/// Runs one seed of the experiment and writes its artifacts under
/// `<out_dir>/seed_<seed>/`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let dir = cfg.out_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let ds = cfg.dataset.build(cfg.loss, seed)?;
    save_csv(&dir.join("dataset.csv"), &ds)?;
    write_json(
        &dir.join("dataset.json"),
        &DatasetMeta {
            name: ds.name.clone(),
            seed: ds.seed,
            generator: format!("{:?}", cfg.dataset.generator),
            args: serde_json::to_value(&cfg.dataset)
                .map_err(|e| Error::Schema(e.to_string()))?,
        },
    )?;

    let params0 = init_params(&cfg.network, &mut stream(seed, Stream::Init));
    let diag = cfg.diag_config(if cfg.diag.checkpoint_stride > 0 {
        Some(dir.join("checkpoints"))
    } else {
        None
    });
    let t0 = Instant::now();
    let result: TrainResult = match cfg.ee_config() {
        Some(ee) => ee_train(&cfg.network, &params0, &ds, &ee, cfg.steps, &diag, seed)?,
        None => train_plain(
            &cfg.network,
            &params0,
            &GateState::live(),
            &ds,
            &cfg.optimizer,
            cfg.steps,
            &diag,
            seed,
        )?,
    };
    let wall = t0.elapsed().as_secs_f64();

    result.trace.write_csv(&dir.join("trace.csv"))?;
    if !result.trace.bound_samples.is_empty() {
        write_json(&dir.join("bound_samples.json"), &result.trace.bound_samples)?;
    }
    let q_tail: Vec<(u64, u64)> = result
        .trace
        .records
        .iter()
        .filter_map(|r| r.q_t.map(|q| (r.step, q)))
        .rev()
        .take(5)
        .collect();
    let drift_final = result
        .trace
        .records
        .iter()
        .filter_map(|r| r.drift)
        .last();
    let summary = RunSummary {
        name: cfg.name.clone(),
        seed,
        steps: result.trace.summary.steps,
        final_loss: result.trace.summary.final_loss,
        final_train_error: result.trace.summary.final_train_error,
        q_final: result.trace.summary.q_final,
        q_tail,
        drift_final,
        l_emp: result.trace.summary.l_emp,
        l_hat: result.trace.summary.l_hat,
        b_to_best: result.trace.summary.b_to_best,
        tau: result.trace.summary.tau,
        diverged: result.diverged,
        wall_time_secs: wall,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(SeedOutcome { summary, dir })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
