//! Per-step training records and their CSV form.

use crate::diagnostics::BoundSample;
use crate::error::{Error, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Explore,
    Exploit,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Explore => "explore",
            Phase::Exploit => "exploit",
        }
    }
}

/// State of the run at the start of step `step` (before that step's update).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
    pub grad_norm: f64,
    pub train_error: f64,
    pub aligned: Option<bool>,
    pub rel_residual: Option<f64>,
    pub q_t: Option<u64>,
    pub drift: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub final_train_error: f64,
    /// Empirical smoothness estimate from consecutive full-batch gradients.
    pub l_emp: Option<f64>,
    /// Exact exploitation smoothness constant (wrapper runs).
    pub l_hat: Option<f64>,
    /// Distance from the switch-point penultimate weights to the best-found
    /// exploit iterate (wrapper runs).
    pub b_to_best: Option<f64>,
    pub tau: Option<u64>,
    pub q_final: u64,
}

#[derive(Clone, Debug)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    /// Per-sampled-step scalars feeding the optimality-gap bound.
    pub bound_samples: Vec<BoundSample>,
    pub summary: TrainSummary,
}

impl TrainTrace {
    pub fn new(tau: Option<u64>) -> TrainTrace {
        TrainTrace {
            records: Vec::new(),
            bound_samples: Vec::new(),
            summary: TrainSummary {
                tau,
                ..TrainSummary::default()
            },
        }
    }

    /// Fixed-schema CSV; unsampled diagnostic fields are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.records.len() + 1));
        s.push_str("step,phase,loss,grad_norm,train_error,aligned,rel_residual,q_t,drift\n");
        for r in &self.records {
            let _ = write!(
                s,
                "{},{},{},{},{}",
                r.step,
                r.phase.as_str(),
                r.loss,
                r.grad_norm,
                r.train_error
            );
            match r.aligned {
                Some(a) => {
                    let _ = write!(s, ",{a}");
                }
                None => s.push(','),
            }
            match r.rel_residual {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
            match r.q_t {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
            match r.drift {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Parses a CSV produced by [`TrainTrace::to_csv`].
    pub fn from_csv(text: &str) -> Result<TrainTrace> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty trace".into(),
        })?;
        if header != "step,phase,loss,grad_norm,train_error,aligned,rel_residual,q_t,drift" {
            return Err(Error::Schema(format!("unexpected trace header {header:?}")));
        }
        let mut records = Vec::new();
        for (lineno, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected 9 fields, got {}", f.len()),
                });
            }
            let parse_f = |s: &str, what: &str| -> Result<f64> {
                s.parse().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("{what}: {e}"),
                })
            };
            let opt_f = |s: &str, what: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    parse_f(s, what).map(Some)
                }
            };
            let phase = match f[1] {
                "explore" => Phase::Explore,
                "exploit" => Phase::Exploit,
                other => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: format!("unknown phase {other:?}"),
                    })
                }
            };
            records.push(StepRecord {
                step: f[0].parse().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("step: {e}"),
                })?,
                phase,
                loss: parse_f(f[2], "loss")?,
                grad_norm: parse_f(f[3], "grad_norm")?,
                train_error: parse_f(f[4], "train_error")?,
                aligned: match f[5] {
                    "" => None,
                    "true" => Some(true),
                    "false" => Some(false),
                    other => {
                        return Err(Error::Parse {
                            line: lineno + 1,
                            msg: format!("aligned: {other:?}"),
                        })
                    }
                },
                rel_residual: opt_f(f[6], "rel_residual")?,
                q_t: if f[7].is_empty() {
                    None
                } else {
                    Some(f[7].parse().map_err(|e| Error::Parse {
                        line: lineno + 1,
                        msg: format!("q_t: {e}"),
                    })?)
                },
                drift: opt_f(f[8], "drift")?,
            });
        }
        Ok(TrainTrace {
            records,
            bound_samples: Vec::new(),
            summary: TrainSummary::default(),
        })
    }
}
