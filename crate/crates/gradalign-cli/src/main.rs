//! Experiment runner and report emitter: generates data, trains plain or
//! wrapped networks, computes certificates and bound reports, and renders
//! trace plots.

mod config;
mod run;
mod svg;

use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use gradalign::data::{gen_random, gen_sine, gen_two_moons, load_csv, save_csv, Dataset, DatasetMeta};
use gradalign::diagnostics::{
    alignment, bound_check, gram, gram_drift, head_width_rule, safe_exploration_check,
    BoundSample,
};
use gradalign::error::Error;
use gradalign::linalg::Matrix;
use gradalign::losses::{reference_loss, LossKind};
use gradalign::model::{load_checkpoint, GateState, NetworkSpec, ParamVector};
use gradalign::rng;
use gradalign::training::TrainTrace;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gradalign", version, about = "training-dynamics laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV plus a metadata sidecar.
    Gen {
        #[command(subcommand)]
        which: GenCommand,
    },
    /// Run an experiment described by a JSON config.
    Train {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Run the configured seeds in parallel.
        #[arg(long)]
        parallel: bool,
    },
    /// Compute a certificate or bound report.
    Diagnose {
        #[command(subcommand)]
        which: DiagnoseCommand,
    },
    /// Render a trace CSV as an SVG plot.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenCommon {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GenCommand {
    /// Two interleaved half-circles with binary labels.
    TwoMoons {
        #[command(flatten)]
        common: GenCommon,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Scalar inputs labeled by the sign of a sine wave.
    Sine {
        #[command(flatten)]
        common: GenCommon,
        #[arg(long, default_value_t = 20.0)]
        freq: f64,
    },
    /// Gaussian inputs with uniform binary labels.
    Random {
        #[command(flatten)]
        common: GenCommon,
        #[arg(long, default_value_t = 256)]
        dim: usize,
    },
}

#[derive(Subcommand)]
enum DiagnoseCommand {
    /// Membership of the modified target in the Jacobian column space at a
    /// checkpoint.
    Alignment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "binary_ce")]
        loss: LossArg,
        #[arg(long, default_value_t = gradalign::diagnostics::DEFAULT_ALIGNMENT_TOL)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full-row-rank certificate of the gated head's feature matrix.
    SafeExploration {
        #[arg(long)]
        n: usize,
        /// Penultimate width including the constant neuron.
        #[arg(long)]
        mh1: usize,
        /// Last hidden width; omit to derive it from --mh-rule.
        #[arg(long)]
        mh: Option<usize>,
        /// Sizing rule: `2n-over-mh1` sets mh = ceil(2n / mh1).
        #[arg(long)]
        mh_rule: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Input dimension of the probe data (standard normal draws).
        #[arg(long, default_value_t = 4)]
        dim: usize,
        /// Gate sharpness of the probe head.
        #[arg(long, default_value_t = 1.0)]
        gate_sharpness: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimality-gap bound reports from a run directory produced by
    /// `train` with bound scalars enabled.
    Bounds {
        /// Seed directory containing bound_samples.json, summary.json,
        /// dataset.csv and trace.csv.
        #[arg(long)]
        run: PathBuf,
        /// Margin scales to evaluate (repeatable).
        #[arg(long = "eta", required = true)]
        etas: Vec<f64>,
        /// Normalized step size; by default derived as lr * l_emp / 2.
        #[arg(long)]
        alpha: Option<f64>,
        /// Smoothness constant; by default the run's empirical estimate.
        #[arg(long)]
        l_used: Option<f64>,
        /// Constant learning rate of the run (needed to derive alpha).
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        loss: Option<LossArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gram-matrix drift between two checkpoints.
    Drift {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "binary_ce")]
        loss: LossArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LossArg {
    #[value(name = "squared")]
    Squared,
    #[value(name = "binary_ce")]
    BinaryCe,
    #[value(name = "multiclass_ce")]
    MulticlassCe,
}

impl From<LossArg> for LossKind {
    fn from(a: LossArg) -> LossKind {
        match a {
            LossArg::Squared => LossKind::Squared,
            LossArg::BinaryCe => LossKind::BinaryCe,
            LossArg::MulticlassCe => LossKind::MulticlassCe,
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("GRADALIGN_THREADS") {
        if let Ok(k) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
        }
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            let code = match &e {
                Error::Diverged { .. } => 2,
                _ => 1,
            };
            eprintln!("error[{}]: {e}", error_code(&e));
            ExitCode::from(code)
        }
    }
}

fn error_code(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch { .. } => "shape",
        Error::Contract { .. } => "contract",
        Error::DecompositionFailure { .. } => "decomposition",
        Error::NumericOverflow { .. } => "overflow",
        Error::SizeExceeded { .. } => "size",
        Error::Diverged { .. } => "diverged",
        Error::Parse { .. } => "parse",
        Error::Schema(_) => "schema",
        Error::Io { .. } => "io",
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Gen { which } => {
            let (ds, common, extra): (Dataset, &GenCommon, serde_json::Value) = match &which {
                GenCommand::TwoMoons { common, noise } => (
                    gen_two_moons(common.n, *noise, common.seed)?,
                    common,
                    serde_json::json!({"noise_std": noise}),
                ),
                GenCommand::Sine { common, freq } => (
                    gen_sine(common.n, *freq, common.seed)?,
                    common,
                    serde_json::json!({"freq": freq}),
                ),
                GenCommand::Random { common, dim } => (
                    gen_random(common.n, *dim, common.seed)?,
                    common,
                    serde_json::json!({"dim": dim}),
                ),
            };
            save_csv(&common.out, &ds)?;
            let meta = DatasetMeta {
                name: ds.name.clone(),
                seed: ds.seed,
                generator: ds.name.clone(),
                args: extra,
            };
            run::write_json(&common.out.with_extension("json"), &meta)?;
            println!("wrote {} ({} rows)", common.out.display(), ds.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            out_dir,
            parallel,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            std::fs::create_dir_all(&cfg.out_dir)
                .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
            run::write_json(&cfg.out_dir.join("config.json"), &cfg)?;
            let seeds = cfg.seeds.clone();
            let outcomes: Vec<Result<run::SeedOutcome, Error>> = if parallel {
                use rayon::prelude::*;
                seeds.par_iter().map(|&s| run::run_seed(&cfg, s)).collect()
            } else {
                seeds.iter().map(|&s| run::run_seed(&cfg, s)).collect()
            };
            let mut any_diverged = None;
            for outcome in outcomes {
                let o = outcome?;
                println!(
                    "seed {}: loss {:.6e}, error {:.4}, q {}, wall {:.1}s{}",
                    o.summary.seed,
                    o.summary.final_loss,
                    o.summary.final_train_error,
                    o.summary.q_final,
                    o.summary.wall_time_secs,
                    match o.summary.diverged {
                        Some(step) => format!(", DIVERGED at step {step}"),
                        None => String::new(),
                    }
                );
                if let Some(step) = o.summary.diverged {
                    any_diverged = Some(step);
                }
            }
            if let Some(step) = any_diverged {
                return Err(Error::Diverged {
                    step,
                    msg: "partial trace written".into(),
                });
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnose { which } => diagnose(which),
        Command::Plot { trace, out } => {
            let text = std::fs::read_to_string(&trace)
                .map_err(|e| Error::io(trace.display().to_string(), e))?;
            let parsed = TrainTrace::from_csv(&text)?;
            let svg_text = svg::render_trace(&parsed)?;
            std::fs::write(&out, svg_text)
                .map_err(|e| Error::io(out.display().to_string(), e))?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn diagnose(cmd: DiagnoseCommand) -> Result<ExitCode, Error> {
    match cmd {
        DiagnoseCommand::Alignment {
            checkpoint,
            data,
            loss,
            tol,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load_csv(&data, loss.into(), 0)?;
            let params = ParamVector::from_theta(&ckpt.spec, ckpt.theta.clone())?;
            let rec = alignment(&ckpt.spec, &params, &ckpt.gates, &ds, tol, ckpt.step)?;
            emit(&rec, out)
        }
        DiagnoseCommand::SafeExploration {
            n,
            mh1,
            mh,
            mh_rule,
            seed,
            dim,
            gate_sharpness,
            out,
        } => {
            let m_h = match (mh, mh_rule.as_deref()) {
                (Some(v), _) => v,
                (None, Some("2n-over-mh1")) => head_width_rule(n, mh1),
                (None, Some(other)) => {
                    return Err(Error::Schema(format!("unknown sizing rule {other:?}")))
                }
                (None, None) => {
                    return Err(Error::Schema("pass --mh or --mh-rule".into()))
                }
            };
            if mh1 == 0 {
                return Err(Error::Schema("mh1 must be positive".into()));
            }
            // Probe network: z-bar width mh1 - 1 so z (with the constant
            // neuron) has width mh1.
            let net = NetworkSpec::gated(vec![dim, mh1 - 1, m_h, 1], 100.0, gate_sharpness)?;
            let mut data_rng = rng::stream(seed, rng::Stream::Data);
            let x = Matrix::new(n, dim, rng::normal_vec(&mut data_rng, n * dim))?;
            let cert = safe_exploration_check(&net, &x, seed)?;
            println!(
                "n={} m_H={} m_H-1={} rank={} (alt {}) satisfied={}",
                cert.n, cert.m_h, cert.m_hm1, cert.phi_rank, cert.phi_rank_alt, cert.satisfied
            );
            emit(&cert, out)
        }
        DiagnoseCommand::Bounds {
            run: run_dir,
            etas,
            alpha,
            l_used,
            lr,
            loss,
            out,
        } => {
            let samples_path = run_dir.join("bound_samples.json");
            let samples_text = std::fs::read_to_string(&samples_path)
                .map_err(|e| Error::io(samples_path.display().to_string(), e))?;
            let samples: Vec<BoundSample> = serde_json::from_str(&samples_text)
                .map_err(|e| Error::Schema(format!("bound_samples.json: {e}")))?;
            let summary_path = run_dir.join("summary.json");
            let summary: serde_json::Value = serde_json::from_str(
                &std::fs::read_to_string(&summary_path)
                    .map_err(|e| Error::io(summary_path.display().to_string(), e))?,
            )
            .map_err(|e| Error::Schema(format!("summary.json: {e}")))?;
            let l = l_used
                .or_else(|| summary.get("l_emp").and_then(|v| v.as_f64()))
                .ok_or_else(|| {
                    Error::Schema("no smoothness constant: pass --l-used".into())
                })?;
            let a = match alpha {
                Some(a) => a,
                None => {
                    let r = lr.ok_or_else(|| {
                        Error::Schema("pass --alpha or --lr to derive it".into())
                    })?;
                    r * l / 2.0
                }
            };
            let kind: LossKind = loss.map(Into::into).unwrap_or(LossKind::BinaryCe);
            let ds = load_csv(&run_dir.join("dataset.csv"), kind, 0)?;
            let mut reports = Vec::new();
            for &eta in &etas {
                let reference = reference_loss(kind, &ds.y, &ds.y_ell, eta)?;
                reports.push(bound_check(&samples, reference, eta, a, l)?);
            }
            for r in &reports {
                println!(
                    "eta={}: lhs={:.6e} rhs={:.6e} holds={} (|T|={})",
                    r.eta,
                    r.lhs,
                    r.rhs,
                    r.holds,
                    r.alignment_steps.len()
                );
            }
            emit(&reports, out)
        }
        DiagnoseCommand::Drift {
            from,
            to,
            data,
            loss,
            out,
        } => {
            let a = load_checkpoint(&from)?;
            let b = load_checkpoint(&to)?;
            let ds = load_csv(&data, loss.into(), 0)?;
            let pa = ParamVector::from_theta(&a.spec, a.theta.clone())?;
            let pb = ParamVector::from_theta(&b.spec, b.theta.clone())?;
            let ma = gram(&a.spec, &pa, &a.gates, &ds.x)?;
            let mb = gram(&b.spec, &pb, &b.gates, &ds.x)?;
            let drift = gram_drift(&ma, &mb)?;
            let report = serde_json::json!({
                "from_step": a.step,
                "to_step": b.step,
                "drift": drift,
            });
            println!("drift({} -> {}) = {drift:.6e}", a.step, b.step);
            emit(&report, out)
        }
    }
}

fn emit<T: serde::Serialize>(value: &T, out: Option<PathBuf>) -> Result<ExitCode, Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    match out {
        Some(path) => {
            std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?
        }
        None => println!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
