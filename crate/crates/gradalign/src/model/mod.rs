//! Dense network engine.
//!
//! Two head modes share one widths vector `[m_x, w_1, ..., w_{H-1}, m_y]`:
//!
//! - `Plain`: a softplus multilayer perceptron with additive biases and a
//!   pre-activation linear output. The structure set `S` is the last layer's
//!   `[W, b]`.
//! - `Gated`: the last two layers are replaced by a per-output gated head.
//!   The penultimate output gains a constant neuron, `z = [zbar^T, 1]^T` of
//!   width `m_{H-1} = w_{H-2} + 1`; each output `j` owns a matrix
//!   `W^{(H-1,j)}` of shape `m_H x m_{H-1}` and the head computes
//!   `f_j = W^{(H)}_{j*} (sig(G^{(j)} z) .* (W^{(H-1,j)} z))` where
//!   `G^{(j)}` is the live `W^{(H-1,j)}` or a frozen copy. `S` is all of
//!   `W^{(H)}`.
//!
//! Initialization is i.i.d. normal with standard deviation `1/sqrt(fan_in)`
//! for every dense weight matrix (biases zero); the gated head uses the same
//! variance scaling with fan-in `m_{H-1}` for the penultimate matrices and
//! `m_H` for the last layer.

mod checkpoint;
mod forward;
mod grad;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use forward::{forward, lower_output_z, softplus, softplus_matrix, GateState};
pub use grad::{
    common_structure_reconstruct, jacobian, jacobian_with_cap, loss_gradient, nu_vector,
    DEFAULT_JACOBIAN_CAP,
};
pub use params::{devectorize, init_params, vectorize, GatedLayout, LayerWeights, ParamLayout, ParamVector};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Plain,
    Gated,
}

/// Architecture description; owns widths and activation sharpness but no
/// parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[m_x, w_1, ..., w_{H-1}, m_y]`; `H = layer_widths.len() - 1`
    /// trainable layers.
    pub layer_widths: Vec<usize>,
    pub head_mode: HeadMode,
    /// Softplus sharpness for hidden activations.
    pub softplus_sharpness: f64,
    /// Gate sigmoid sharpness (gated mode only).
    #[serde(default = "default_gate_sharpness")]
    pub gate_sharpness: f64,
    /// Additive biases on plain dense layers (always absent in the gated
    /// head itself, which carries its bias through the constant neuron).
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_gate_sharpness() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl NetworkSpec {
    /// Plain softplus MLP with at least two trainable layers.
    pub fn mlp(layer_widths: Vec<usize>, softplus_sharpness: f64) -> Result<NetworkSpec> {
        let spec = NetworkSpec {
            layer_widths,
            head_mode: HeadMode::Plain,
            softplus_sharpness,
            gate_sharpness: 1.0,
            bias: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Gated-head network with at least two trainable layers.
    pub fn gated(
        layer_widths: Vec<usize>,
        softplus_sharpness: f64,
        gate_sharpness: f64,
    ) -> Result<NetworkSpec> {
        let spec = NetworkSpec {
            layer_widths,
            head_mode: HeadMode::Gated,
            softplus_sharpness,
            gate_sharpness,
            bias: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Degenerate single-layer linear model `f(x) = W x` (no bias, no
    /// activation). Used as a fixture where the identity of gradient
    /// representation and feature map can be checked exactly.
    pub fn linear(m_x: usize, m_y: usize) -> NetworkSpec {
        NetworkSpec {
            layer_widths: vec![m_x, m_y],
            head_mode: HeadMode::Plain,
            softplus_sharpness: 1.0,
            gate_sharpness: 1.0,
            bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::Contract {
                op: "NetworkSpec",
                msg: "need at least two trainable layers".into(),
            });
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Contract {
                op: "NetworkSpec",
                msg: "zero layer width".into(),
            });
        }
        if !(self.softplus_sharpness > 0.0) || !(self.gate_sharpness > 0.0) {
            return Err(Error::Contract {
                op: "NetworkSpec",
                msg: "activation sharpness must be positive".into(),
            });
        }
        Ok(())
    }

    /// Number of trainable layers `H`.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn is_gated(&self) -> bool {
        self.head_mode == HeadMode::Gated
    }

    /// Gated mode: width of the last hidden layer (`m_H`).
    pub fn m_h(&self) -> usize {
        debug_assert!(self.is_gated());
        self.layer_widths[self.depth() - 1]
    }

    /// Gated mode: width of `z` including the constant neuron (`m_{H-1}`).
    pub fn m_hm1(&self) -> usize {
        debug_assert!(self.is_gated());
        let h = self.depth();
        if h == 2 {
            self.layer_widths[0] + 1
        } else {
            self.layer_widths[h - 2] + 1
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::of(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_requires_two_layers() {
        assert!(NetworkSpec::mlp(vec![2, 1], 100.0).is_err());
        assert!(NetworkSpec::mlp(vec![2, 8, 1], 100.0).is_ok());
    }

    #[test]
    fn gated_dims() {
        let net = NetworkSpec::gated(vec![1, 300, 300, 300, 1], 100.0, 1000.0).unwrap();
        assert_eq!(net.depth(), 4);
        assert_eq!(net.m_h(), 300);
        assert_eq!(net.m_hm1(), 301);
        let net = NetworkSpec::gated(vec![3, 5, 2], 100.0, 1.0).unwrap();
        assert_eq!(net.depth(), 2);
        assert_eq!(net.m_h(), 5);
        assert_eq!(net.m_hm1(), 4);
    }
}
