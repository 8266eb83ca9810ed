//! Experiment configuration documents.
//!
//! Experiments are JSON files so the reference settings ship as versionable
//! fixtures (see `experiments/`). Unknown keys are rejected.

use gradalign::data::{gen_random, gen_sine, gen_two_moons, load_csv, Dataset};
use gradalign::error::{Error, Result};
use gradalign::losses::LossKind;
use gradalign::model::NetworkSpec;
use gradalign::training::{
    DiagConfig, EEConfig, ExploitLrMode, LrSchedule, OptKind, OptimizerSpec,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct DatasetSpec {
    pub generator: GeneratorKind,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default)]
    pub freq: Option<f64>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Fixed dataset seed; when absent, each trial seed is used.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    TwoMoons,
    Sine,
    Random,
    Csv,
}

impl DatasetSpec {
    pub fn build(&self, kind: LossKind, trial_seed: u64) -> Result<Dataset> {
        let seed = self.seed.unwrap_or(trial_seed);
        let ds = match self.generator {
            GeneratorKind::TwoMoons => gen_two_moons(
                self.n.unwrap_or(100),
                self.noise_std.unwrap_or(0.0),
                seed,
            )?,
            GeneratorKind::Sine => {
                gen_sine(self.n.unwrap_or(100), self.freq.unwrap_or(20.0), seed)?
            }
            GeneratorKind::Random => {
                gen_random(self.n.unwrap_or(1000), self.dim.unwrap_or(256), seed)?
            }
            GeneratorKind::Csv => {
                let path = self.path.as_ref().ok_or_else(|| {
                    Error::Schema("csv generator requires a path".into())
                })?;
                load_csv(path, kind, seed)?
            }
        };
        ds.with_kind(kind)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EeSection {
    pub tau: u64,
    pub epsilon: f64,
    /// Exploitation optimizer; `null` reuses the exploration optimizer.
    #[serde(default)]
    pub exploit: Option<OptimizerSpec>,
    #[serde(default = "default_exploit_lr_mode")]
    pub exploit_lr_mode: ExploitLrMode,
}

fn default_exploit_lr_mode() -> ExploitLrMode {
    ExploitLrMode::Manual
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagSection {
    #[serde(default)]
    pub stride: usize,
    #[serde(default)]
    pub alignment: bool,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub drift: bool,
    #[serde(default)]
    pub bound_scalars: bool,
    #[serde(default)]
    pub checkpoint_stride: usize,
}

fn default_tol() -> f64 {
    gradalign::diagnostics::DEFAULT_ALIGNMENT_TOL
}

impl Default for DiagSection {
    fn default() -> Self {
        DiagSection {
            stride: 0,
            alignment: false,
            tol: default_tol(),
            drift: false,
            bound_scalars: false,
            checkpoint_stride: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub loss: LossKind,
    pub network: NetworkSpec,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub ee: Option<EeSection>,
    pub steps: u64,
    #[serde(default)]
    pub diag: DiagSection,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Schema("seeds must be non-empty".into()));
        }
        if self.steps == 0 {
            return Err(Error::Schema("steps must be positive".into()));
        }
        if self.optimizer.kind == OptKind::Gd
            && matches!(self.optimizer.lr, LrSchedule::Constant(c) if c < 0.0)
        {
            return Err(Error::Schema("negative learning rate".into()));
        }
        Ok(())
    }

    pub fn ee_config(&self) -> Option<EEConfig> {
        self.ee.as_ref().map(|s| EEConfig {
            tau: s.tau,
            epsilon: s.epsilon,
            explore: self.optimizer.clone(),
            exploit: s.exploit.clone().unwrap_or_else(|| self.optimizer.clone()),
            exploit_lr_mode: s.exploit_lr_mode,
        })
    }

    pub fn diag_config(&self, checkpoint_dir: Option<PathBuf>) -> DiagConfig {
        DiagConfig {
            stride: self.diag.stride,
            alignment: self.diag.alignment,
            tol: self.diag.tol,
            drift: self.diag.drift,
            bound_scalars: self.diag.bound_scalars,
            checkpoint_stride: self.diag.checkpoint_stride,
            checkpoint_dir,
        }
    }
}
