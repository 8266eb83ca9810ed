//! Flat parameter vectors and their index maps.

use super::{HeadMode, NetworkSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// Per-output-j index ranges of the gated head inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatedLayout {
    /// Range of `vec_rows(W^{(H-1,j)})` per output j.
    pub w_hm1: Vec<Range<usize>>,
    /// Range of `theta_(H,j) = (W^{(H)}_{j*})^T` per output j.
    pub w_h: Vec<Range<usize>>,
    pub m_h: usize,
    pub m_hm1: usize,
}

/// Index map of a flat parameter vector: half-open per-layer ranges
/// partitioning `[0, dim)`, the structure set `S` (always the last layer's
/// range), and the per-output sublayout in gated mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub layer_ranges: Vec<Range<usize>>,
    pub structure_set: Range<usize>,
    pub gated: Option<GatedLayout>,
    pub dim: usize,
}

impl ParamLayout {
    pub fn of(net: &NetworkSpec) -> ParamLayout {
        let h = net.depth();
        let w = &net.layer_widths;
        let mut ranges = Vec::with_capacity(h);
        let mut off = 0usize;
        match net.head_mode {
            HeadMode::Plain => {
                for l in 1..=h {
                    let mut len = w[l] * w[l - 1];
                    if net.bias {
                        len += w[l];
                    }
                    ranges.push(off..off + len);
                    off += len;
                }
                ParamLayout {
                    structure_set: ranges[h - 1].clone(),
                    layer_ranges: ranges,
                    gated: None,
                    dim: off,
                }
            }
            HeadMode::Gated => {
                for l in 1..h.saturating_sub(1) {
                    let mut len = w[l] * w[l - 1];
                    if net.bias {
                        len += w[l];
                    }
                    ranges.push(off..off + len);
                    off += len;
                }
                let (m_y, m_h, m_hm1) = (net.output_dim(), net.m_h(), net.m_hm1());
                let mut w_hm1 = Vec::with_capacity(m_y);
                for _ in 0..m_y {
                    w_hm1.push(off..off + m_h * m_hm1);
                    off += m_h * m_hm1;
                }
                ranges.push(w_hm1[0].start..off);
                let mut w_h = Vec::with_capacity(m_y);
                for _ in 0..m_y {
                    w_h.push(off..off + m_h);
                    off += m_h;
                }
                ranges.push(w_h[0].start..off);
                ParamLayout {
                    structure_set: ranges[h - 1].clone(),
                    layer_ranges: ranges,
                    gated: Some(GatedLayout {
                        w_hm1,
                        w_h,
                        m_h,
                        m_hm1,
                    }),
                    dim: off,
                }
            }
        }
    }
}

/// Flat parameter vector with its index map.
#[derive(Clone, Debug)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn from_theta(net: &NetworkSpec, theta: Vec<f64>) -> Result<ParamVector> {
        let layout = net.layout();
        if theta.len() != layout.dim {
            return Err(Error::ShapeMismatch {
                op: "ParamVector::from_theta",
                expected: format!("{} parameters", layout.dim),
                got: format!("{}", theta.len()),
            });
        }
        Ok(ParamVector { theta, layout })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn zeros(net: &NetworkSpec) -> ParamVector {
        let layout = net.layout();
        ParamVector {
            theta: vec![0.0; layout.dim],
            layout,
        }
    }
}

/// Seeded variance-scaling initialization (draw order is part of the
/// reproducibility contract: layer by layer, row-major, outputs in order).
pub fn init_params(net: &NetworkSpec, rng: &mut ChaCha8Rng) -> ParamVector {
    let mut pv = ParamVector::zeros(net);
    let h = net.depth();
    let w = &net.layer_widths;
    match net.head_mode {
        HeadMode::Plain => {
            for l in 1..=h {
                let range = pv.layout.layer_ranges[l - 1].clone();
                let std = 1.0 / (w[l - 1] as f64).sqrt();
                let wlen = w[l] * w[l - 1];
                for k in 0..wlen {
                    pv.theta[range.start + k] = std * rng::normal(rng);
                }
                // biases stay zero
            }
        }
        HeadMode::Gated => {
            for l in 1..h - 1 {
                let range = pv.layout.layer_ranges[l - 1].clone();
                let std = 1.0 / (w[l - 1] as f64).sqrt();
                let wlen = w[l] * w[l - 1];
                for k in 0..wlen {
                    pv.theta[range.start + k] = std * rng::normal(rng);
                }
            }
            let gl = pv.layout.gated.clone().unwrap();
            let std_pen = 1.0 / (gl.m_hm1 as f64).sqrt();
            for r in &gl.w_hm1 {
                for k in r.clone() {
                    pv.theta[k] = std_pen * rng::normal(rng);
                }
            }
            let std_last = 1.0 / (gl.m_h as f64).sqrt();
            for r in &gl.w_h {
                for k in r.clone() {
                    pv.theta[k] = std_last * rng::normal(rng);
                }
            }
        }
    }
    pv
}

/// Structured view of one layer's weights.
#[derive(Clone, Debug)]
pub enum LayerWeights {
    Dense { w: Matrix, b: Option<Vec<f64>> },
    GatedPenultimate { w: Vec<Matrix> },
    GatedLast { w: Matrix },
}

/// Splits a flat vector into per-layer weight structures.
pub fn devectorize(net: &NetworkSpec, theta: &[f64]) -> Result<Vec<LayerWeights>> {
    let layout = net.layout();
    if theta.len() != layout.dim {
        return Err(Error::ShapeMismatch {
            op: "devectorize",
            expected: format!("{}", layout.dim),
            got: format!("{}", theta.len()),
        });
    }
    let h = net.depth();
    let w = &net.layer_widths;
    let mut out = Vec::with_capacity(h);
    let plain_layers = match net.head_mode {
        HeadMode::Plain => h,
        HeadMode::Gated => h - 2,
    };
    for l in 1..=plain_layers {
        let range = layout.layer_ranges[l - 1].clone();
        let wlen = w[l] * w[l - 1];
        let wm = Matrix::new(w[l], w[l - 1], theta[range.start..range.start + wlen].to_vec())?;
        let b = if net.bias {
            Some(theta[range.start + wlen..range.end].to_vec())
        } else {
            None
        };
        out.push(LayerWeights::Dense { w: wm, b });
    }
    if net.head_mode == HeadMode::Gated {
        let gl = layout.gated.as_ref().unwrap();
        let mut ws = Vec::with_capacity(net.output_dim());
        for r in &gl.w_hm1 {
            ws.push(Matrix::new(gl.m_h, gl.m_hm1, theta[r.clone()].to_vec())?);
        }
        out.push(LayerWeights::GatedPenultimate { w: ws });
        let mut data = Vec::with_capacity(net.output_dim() * gl.m_h);
        for r in &gl.w_h {
            data.extend_from_slice(&theta[r.clone()]);
        }
        out.push(LayerWeights::GatedLast {
            w: Matrix::new(net.output_dim(), gl.m_h, data)?,
        });
    }
    Ok(out)
}

/// Inverse of `devectorize`; the round trip is lossless.
pub fn vectorize(net: &NetworkSpec, layers: &[LayerWeights]) -> Result<ParamVector> {
    let layout = net.layout();
    let mut theta = vec![0.0; layout.dim];
    if layers.len() != net.depth() {
        return Err(Error::ShapeMismatch {
            op: "vectorize",
            expected: format!("{} layers", net.depth()),
            got: format!("{}", layers.len()),
        });
    }
    let mut idx = 0usize;
    for (li, lw) in layers.iter().enumerate() {
        match lw {
            LayerWeights::Dense { w, b } => {
                let range = layout.layer_ranges[li].clone();
                let wlen = w.rows() * w.cols();
                theta[range.start..range.start + wlen].copy_from_slice(w.data());
                if let Some(bv) = b {
                    theta[range.start + wlen..range.end].copy_from_slice(bv);
                }
                idx = range.end;
            }
            LayerWeights::GatedPenultimate { w } => {
                let gl = layout.gated.as_ref().ok_or(Error::Contract {
                    op: "vectorize",
                    msg: "gated layer in plain spec".into(),
                })?;
                for (r, m) in gl.w_hm1.iter().zip(w) {
                    theta[r.clone()].copy_from_slice(m.data());
                }
                idx = gl.w_hm1.last().unwrap().end;
            }
            LayerWeights::GatedLast { w } => {
                let gl = layout.gated.as_ref().ok_or(Error::Contract {
                    op: "vectorize",
                    msg: "gated layer in plain spec".into(),
                })?;
                for (j, r) in gl.w_h.iter().enumerate() {
                    theta[r.clone()].copy_from_slice(w.row(j));
                }
                idx = gl.w_h.last().unwrap().end;
            }
        }
    }
    debug_assert_eq!(idx, layout.dim);
    ParamVector::from_theta(net, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn layer_ranges_partition_parameter_vector() {
        for net in [
            NetworkSpec::mlp(vec![2, 7, 5, 1], 100.0).unwrap(),
            NetworkSpec::gated(vec![3, 6, 4, 2], 100.0, 2.0).unwrap(),
            NetworkSpec::linear(4, 2),
        ] {
            let layout = net.layout();
            let mut cursor = 0usize;
            for r in &layout.layer_ranges {
                assert_eq!(r.start, cursor);
                cursor = r.end;
            }
            assert_eq!(cursor, layout.dim);
            assert_eq!(
                layout.structure_set,
                layout.layer_ranges.last().unwrap().clone()
            );
        }
    }

    #[test]
    fn roundtrip_is_lossless() {
        for net in [
            NetworkSpec::mlp(vec![2, 7, 5, 3], 100.0).unwrap(),
            NetworkSpec::gated(vec![3, 6, 4, 2], 100.0, 2.0).unwrap(),
        ] {
            let pv = init_params(&net, &mut stream(9, Stream::Init));
            let layers = devectorize(&net, &pv.theta).unwrap();
            let back = vectorize(&net, &layers).unwrap();
            assert_eq!(pv.theta, back.theta);
        }
    }

    #[test]
    fn gated_extract_reinsert_single_output() {
        let net = NetworkSpec::gated(vec![3, 6, 4, 2], 100.0, 2.0).unwrap();
        let pv = init_params(&net, &mut stream(4, Stream::Init));
        let gl = pv.layout.gated.clone().unwrap();
        let mut theta2 = pv.theta.clone();
        let block = theta2[gl.w_hm1[1].clone()].to_vec();
        theta2[gl.w_hm1[1].clone()].copy_from_slice(&block);
        assert_eq!(pv.theta, theta2);
        // The per-output block has the documented size.
        assert_eq!(block.len(), gl.m_h * gl.m_hm1);
    }

    #[test]
    fn structure_set_is_last_layer_weights() {
        let net = NetworkSpec::gated(vec![3, 6, 4, 2], 100.0, 2.0).unwrap();
        let layout = net.layout();
        let gl = layout.gated.as_ref().unwrap();
        assert_eq!(layout.structure_set.start, gl.w_h[0].start);
        assert_eq!(layout.structure_set.end, gl.w_h.last().unwrap().end);
        assert_eq!(
            layout.structure_set.len(),
            net.output_dim() * net.m_h()
        );
    }
}
