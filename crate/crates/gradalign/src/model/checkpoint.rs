//! Checkpoint persistence.
//!
//! JSON document with fields `format`, `step`, `spec`, `theta`, `gates`,
//! `rng_state`. Every float is written with 17 significant digits
//! (`{:.16e}`), which round-trips `f64` exactly. `rng_state` records the
//! master seed and the word positions of the consuming ChaCha substreams so
//! a run can be resumed mid-stream.

use super::{GateState, HeadMode, NetworkSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde_json::Value;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub batch_word_pos: u128,
    pub perturb_word_pos: u128,
}

impl RngState {
    pub fn fresh(seed: u64) -> RngState {
        RngState {
            seed,
            batch_word_pos: 0,
            perturb_word_pos: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub theta: Vec<f64>,
    pub gates: GateState,
    pub rng_state: RngState,
    pub step: u64,
}

fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

fn push_float_array(out: &mut String, vals: &[f64]) {
    out.push('[');
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push(']');
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let mut s = String::with_capacity(32 + self.theta.len() * 26);
        s.push_str("{\"format\":\"gradalign-checkpoint-v1\",");
        let _ = write!(s, "\"step\":{},", self.step);
        s.push_str("\"spec\":{");
        let _ = write!(
            s,
            "\"layer_widths\":{:?},",
            self.spec.layer_widths
        );
        let mode = match self.spec.head_mode {
            HeadMode::Plain => "plain",
            HeadMode::Gated => "gated",
        };
        let _ = write!(s, "\"head_mode\":\"{mode}\",");
        let _ = write!(
            s,
            "\"softplus_sharpness\":{},",
            fmt_f64(self.spec.softplus_sharpness)
        );
        let _ = write!(
            s,
            "\"gate_sharpness\":{},",
            fmt_f64(self.spec.gate_sharpness)
        );
        let _ = write!(s, "\"bias\":{}", self.spec.bias);
        s.push_str("},\"theta\":");
        push_float_array(&mut s, &self.theta);
        s.push_str(",\"gates\":{");
        match &self.gates {
            GateState::Live => s.push_str("\"frozen\":false,\"r\":[]"),
            GateState::Frozen(rs) => {
                s.push_str("\"frozen\":true,\"r\":[");
                for (j, r) in rs.iter().enumerate() {
                    if j > 0 {
                        s.push(',');
                    }
                    push_float_array(&mut s, r.data());
                }
                s.push(']');
            }
        }
        s.push_str("},\"rng_state\":{");
        let _ = write!(s, "\"seed\":{},", self.rng_state.seed);
        let _ = write!(
            s,
            "\"batch_word_pos\":\"{}\",",
            self.rng_state.batch_word_pos
        );
        let _ = write!(
            s,
            "\"perturb_word_pos\":\"{}\"",
            self.rng_state.perturb_word_pos
        );
        s.push_str("}}");
        s
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let v: Value =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Schema("checkpoint: not an object".into()))?;
        if obj.get("format").and_then(Value::as_str) != Some("gradalign-checkpoint-v1") {
            return Err(Error::Schema("checkpoint: unknown format tag".into()));
        }
        let step = obj
            .get("step")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Schema("checkpoint: missing step".into()))?;
        let spec_v = obj
            .get("spec")
            .ok_or_else(|| Error::Schema("checkpoint: missing spec".into()))?;
        let spec: NetworkSpec = serde_json::from_value(spec_v.clone())
            .map_err(|e| Error::Schema(format!("checkpoint spec: {e}")))?;
        spec.validate().ok(); // degenerate fixtures are allowed in checkpoints
        let theta = float_array(obj.get("theta"), "theta")?;
        let gates_v = obj
            .get("gates")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Schema("checkpoint: missing gates".into()))?;
        let frozen = gates_v
            .get("frozen")
            .and_then(Value::as_bool)
            .ok_or_else(|| Error::Schema("checkpoint: gates.frozen".into()))?;
        let gates = if frozen {
            let rs_v = gates_v
                .get("r")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Schema("checkpoint: gates.r".into()))?;
            let (m_h, m_hm1) = (spec.m_h(), spec.m_hm1());
            let mut rs = Vec::with_capacity(rs_v.len());
            for rv in rs_v {
                let flat = float_array(Some(rv), "gates.r")?;
                rs.push(Matrix::new(m_h, m_hm1, flat)?);
            }
            GateState::Frozen(rs)
        } else {
            GateState::Live
        };
        let rng_v = obj
            .get("rng_state")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Schema("checkpoint: missing rng_state".into()))?;
        let seed = rng_v
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Schema("checkpoint: rng_state.seed".into()))?;
        let parse_pos = |key: &str| -> Result<u128> {
            rng_v
                .get(key)
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Schema(format!("checkpoint: rng_state.{key}")))?
                .parse::<u128>()
                .map_err(|e| Error::Schema(format!("checkpoint: rng_state.{key}: {e}")))
        };
        Ok(Checkpoint {
            spec,
            theta,
            gates,
            rng_state: RngState {
                seed,
                batch_word_pos: parse_pos("batch_word_pos")?,
                perturb_word_pos: parse_pos("perturb_word_pos")?,
            },
            step,
        })
    }
}

fn float_array(v: Option<&Value>, field: &str) -> Result<Vec<f64>> {
    let arr = v
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema(format!("checkpoint: missing {field}")))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| Error::Schema(format!("checkpoint: non-float in {field}")))
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Checkpoint::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ParamVector};
    use crate::rng::{stream, Stream};

    #[test]
    fn roundtrip_is_lossless_including_awkward_floats() {
        let net = NetworkSpec::gated(vec![2, 4, 3, 2], 100.0, 1000.0).unwrap();
        let mut params = init_params(&net, &mut stream(5, Stream::Init));
        params.theta[0] = 1.0 / 3.0;
        params.theta[1] = -1e-300;
        params.theta[2] = 12345.678901234567;
        let gates = GateState::freeze(&net, &params).unwrap();
        let ckpt = Checkpoint {
            spec: net.clone(),
            theta: params.theta.clone(),
            gates,
            rng_state: RngState {
                seed: 42,
                batch_word_pos: 123456789,
                perturb_word_pos: 16,
            },
            step: 777,
        };
        let json = ckpt.to_json();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back.step, 777);
        assert_eq!(back.spec, net);
        assert_eq!(back.theta, params.theta);
        assert_eq!(back.rng_state, ckpt.rng_state);
        match (&back.gates, &ckpt.gates) {
            (GateState::Frozen(a), GateState::Frozen(b)) => {
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.data(), y.data());
                }
            }
            _ => panic!("gate state lost"),
        }
        // Reload into a parameter vector for the original spec.
        let pv = ParamVector::from_theta(&net, back.theta).unwrap();
        assert_eq!(pv.dim(), net.param_count());
    }

    #[test]
    fn rejects_malformed_documents() {
        assert!(Checkpoint::from_json("{}").is_err());
        assert!(Checkpoint::from_json("not json").is_err());
    }
}
