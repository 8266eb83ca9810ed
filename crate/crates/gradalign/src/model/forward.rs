//! Forward evaluation with cached intermediates for the backward passes.

use super::{HeadMode, NetworkSpec, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::sigmoid;

/// Overflow-safe softplus `ln(1 + exp(s*u)) / s`.
///
/// For `s*u > 30` the direct form would overflow long before `exp` does
/// lose precision, so the linear branch `u + ln1p(exp(-s*u))/s` is used; for
/// very negative arguments `ln1p` underflows gracefully to `exp(s*u)/s`.
pub fn softplus(u: f64, sharpness: f64) -> f64 {
    let x = sharpness * u;
    if x > 30.0 {
        u + (-x).exp().ln_1p() / sharpness
    } else {
        x.exp().ln_1p() / sharpness
    }
}

/// Elementwise softplus.
pub fn softplus_matrix(a: &Matrix, sharpness: f64) -> Matrix {
    let data = a.data().iter().map(|&v| softplus(v, sharpness)).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("softplus of finite input is finite")
}

/// Gate configuration of a gated head: live gates read the current
/// penultimate weights; frozen gates hold an immutable copy per output.
#[derive(Clone, Debug, PartialEq)]
pub enum GateState {
    Live,
    Frozen(Vec<Matrix>),
}

impl GateState {
    pub fn live() -> GateState {
        GateState::Live
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, GateState::Frozen(_))
    }

    /// Snapshot of the current penultimate weights, taken at the freeze
    /// point.
    pub fn freeze(net: &NetworkSpec, params: &ParamVector) -> Result<GateState> {
        if !net.is_gated() {
            return Err(Error::Contract {
                op: "GateState::freeze",
                msg: "freezing requires a gated head".into(),
            });
        }
        let gl = params.layout.gated.as_ref().unwrap();
        let mut rs = Vec::with_capacity(gl.w_hm1.len());
        for r in &gl.w_hm1 {
            rs.push(Matrix::new(
                gl.m_h,
                gl.m_hm1,
                params.theta[r.clone()].to_vec(),
            )?);
        }
        Ok(GateState::Frozen(rs))
    }

    pub fn frozen_matrices(&self) -> Option<&[Matrix]> {
        match self {
            GateState::Live => None,
            GateState::Frozen(rs) => Some(rs),
        }
    }
}

/// `H * W^T (+ b)`, both operands traversed row-contiguously.
fn affine(h: &Matrix, w_rows: usize, w_cols: usize, w: &[f64], b: Option<&[f64]>) -> Matrix {
    debug_assert_eq!(h.cols(), w_cols);
    let n = h.rows();
    let mut out = vec![0.0; n * w_rows];
    for i in 0..n {
        let hrow = h.row(i);
        let orow = &mut out[i * w_rows..(i + 1) * w_rows];
        for (k, o) in orow.iter_mut().enumerate() {
            *o = crate::linalg::row_dot(hrow, &w[k * w_cols..(k + 1) * w_cols]);
        }
        if let Some(bias) = b {
            for (o, &bv) in orow.iter_mut().zip(bias) {
                *o += bv;
            }
        }
    }
    Matrix::from_raw(n, w_rows, out)
}

pub(crate) struct ForwardCache {
    /// Batch input.
    pub x: Matrix,
    /// Post-activation outputs of the plain layers, in order.
    pub hidden: Vec<Matrix>,
    /// Pre-activation inputs of the plain hidden layers, in order.
    pub preact: Vec<Matrix>,
    /// Gated mode: `[zbar | 1]`.
    pub z: Option<Matrix>,
    /// Gated mode, per output j: linear part `Z (W^{(H-1,j)})^T`.
    pub u: Vec<Matrix>,
    /// Gated mode, per output j: gate sigmoid values.
    pub gate_sig: Vec<Matrix>,
    pub out: Matrix,
}

fn check_finite(m: &Matrix, layer: usize) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow {
            op: "forward",
            layer,
        })
    }
}

pub(crate) fn forward_cached(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    x: &Matrix,
) -> Result<ForwardCache> {
    if x.cols() != net.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            expected: format!("{} input columns", net.input_dim()),
            got: format!("{}", x.cols()),
        });
    }
    if params.theta.len() != params.layout.dim || params.layout.dim != net.layout().dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            expected: format!("{} parameters", net.layout().dim),
            got: format!("{}", params.theta.len()),
        });
    }
    let h = net.depth();
    let w = &net.layer_widths;
    let theta = &params.theta;
    let layout = &params.layout;
    let plain_layers = match net.head_mode {
        HeadMode::Plain => h,
        HeadMode::Gated => h - 2,
    };

    let mut hidden: Vec<Matrix> = Vec::new();
    let mut preact: Vec<Matrix> = Vec::new();
    let mut cur = x.clone();
    for l in 1..=plain_layers {
        let range = layout.layer_ranges[l - 1].clone();
        let wlen = w[l] * w[l - 1];
        let wslice = &theta[range.start..range.start + wlen];
        let b = if net.bias {
            Some(&theta[range.start + wlen..range.end])
        } else {
            None
        };
        let a = affine(&cur, w[l], w[l - 1], wslice, b);
        check_finite(&a, l)?;
        let is_output = net.head_mode == HeadMode::Plain && l == h;
        if is_output {
            return Ok(ForwardCache {
                x: x.clone(),
                hidden,
                preact,
                z: None,
                u: Vec::new(),
                gate_sig: Vec::new(),
                out: a,
            });
        }
        let act = softplus_matrix(&a, net.softplus_sharpness);
        check_finite(&act, l)?;
        preact.push(a);
        hidden.push(act.clone());
        cur = act;
    }

    // Gated head. `cur` is zbar (or x itself when H == 2).
    let (m_y, m_h, m_hm1) = (net.output_dim(), net.m_h(), net.m_hm1());
    let n = x.rows();
    let mut zdata = vec![0.0; n * m_hm1];
    for i in 0..n {
        zdata[i * m_hm1..i * m_hm1 + m_hm1 - 1].copy_from_slice(cur.row(i));
        zdata[i * m_hm1 + m_hm1 - 1] = 1.0;
    }
    let z = Matrix::from_raw(n, m_hm1, zdata);
    let gl = layout.gated.as_ref().unwrap();

    let mut us = Vec::with_capacity(m_y);
    let mut sigs = Vec::with_capacity(m_y);
    let mut out = Matrix::zeros(n, m_y);
    for j in 0..m_y {
        let wj = &theta[gl.w_hm1[j].clone()];
        let u = affine(&z, m_h, m_hm1, wj, None);
        check_finite(&u, h - 1)?;
        let gate_pre = match gates {
            GateState::Live => u.clone(),
            GateState::Frozen(rs) => {
                let r = &rs[j];
                if r.rows() != m_h || r.cols() != m_hm1 {
                    return Err(Error::ShapeMismatch {
                        op: "forward",
                        expected: format!("{m_h}x{m_hm1} frozen gate"),
                        got: format!("{}x{}", r.rows(), r.cols()),
                    });
                }
                affine(&z, m_h, m_hm1, r.data(), None)
            }
        };
        let sig_data: Vec<f64> = gate_pre
            .data()
            .iter()
            .map(|&v| sigmoid(net.gate_sharpness * v))
            .collect();
        let sig = Matrix::from_raw(n, m_h, sig_data);
        let w_hj = &theta[gl.w_h[j].clone()];
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..m_h {
                acc += w_hj[k] * sig.at(i, k) * u.at(i, k);
            }
            *out.at_mut(i, j) = acc;
        }
        us.push(u);
        sigs.push(sig);
    }
    check_finite(&out, h)?;
    Ok(ForwardCache {
        x: x.clone(),
        hidden,
        preact,
        z: Some(z),
        u: us,
        gate_sig: sigs,
        out,
    })
}

/// Network outputs (pre-activation logits) for a batch of inputs.
pub fn forward(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    x: &Matrix,
) -> Result<Matrix> {
    Ok(forward_cached(net, params, gates, x)?.out)
}

/// Gated mode: the augmented penultimate input `z = [zbar | 1]`.
pub fn lower_output_z(
    net: &NetworkSpec,
    params: &ParamVector,
    x: &Matrix,
) -> Result<Matrix> {
    if !net.is_gated() {
        return Err(Error::Contract {
            op: "lower_output_z",
            msg: "requires a gated head".into(),
        });
    }
    let cache = forward_cached(net, params, &GateState::Live, x)?;
    Ok(cache.z.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, NetworkSpec};
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;

    #[test]
    fn softplus_examples() {
        // ln(2)/100 at zero.
        assert_relative_eq!(softplus(0.0, 100.0), 2.0f64.ln() / 100.0, epsilon = 1e-15);
        // Near-identity above the kink.
        let v = softplus(1.0, 100.0);
        assert!((v - 1.0).abs() < 1e-10);
        // Vanishing below the kink.
        assert!(softplus(-1.0, 100.0) <= 1e-40);
        // Monotone and positive on a grid.
        let mut prev = -1.0;
        for i in -100..=100 {
            let u = i as f64 / 50.0;
            let s = softplus(u, 100.0);
            assert!(s >= 0.0 && s >= prev);
            prev = s;
        }
    }

    #[test]
    fn one_hidden_layer_hand_forward() {
        // 1 -> 2 -> 1 with hand-picked weights; evaluated by hand with the
        // scalar softplus as the oracle.
        let net = NetworkSpec::mlp(vec![1, 2, 1], 4.0).unwrap();
        let theta = vec![
            0.5, -1.0, // W1 (2x1)
            0.1, 0.2, // b1
            2.0, -3.0, // W2 (1x2)
            0.05, // b2
        ];
        let params = ParamVector::from_theta(&net, theta).unwrap();
        let x = Matrix::from_rows(&[vec![0.7], vec![-0.3]]).unwrap();
        let out = forward(&net, &params, &GateState::live(), &x).unwrap();
        for (i, &xi) in [0.7, -0.3].iter().enumerate() {
            let h1 = softplus(0.5 * xi + 0.1, 4.0);
            let h2 = softplus(-1.0 * xi + 0.2, 4.0);
            let want = 2.0 * h1 - 3.0 * h2 + 0.05;
            assert_relative_eq!(out.at(i, 0), want, epsilon = 1e-12);
        }
    }

    #[test]
    fn gated_zero_penultimate_gives_zero_output() {
        let net = NetworkSpec::gated(vec![2, 3, 4, 2], 100.0, 5.0).unwrap();
        let mut params = init_params(&net, &mut stream(3, Stream::Init));
        let gl = params.layout.gated.clone().unwrap();
        for r in &gl.w_hm1 {
            for k in r.clone() {
                params.theta[k] = 0.0;
            }
        }
        let x = Matrix::from_rows(&[vec![0.4, -0.2], vec![1.0, 2.0]]).unwrap();
        let out = forward(&net, &params, &GateState::live(), &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn freeze_at_current_weights_is_bitwise_identical() {
        let net = NetworkSpec::gated(vec![2, 5, 4, 3], 100.0, 50.0).unwrap();
        let params = init_params(&net, &mut stream(8, Stream::Init));
        let x = Matrix::from_rows(&[vec![0.3, -1.2], vec![0.9, 0.1], vec![-0.5, 0.7]]).unwrap();
        let live = forward(&net, &params, &GateState::live(), &x).unwrap();
        let frozen = GateState::freeze(&net, &params).unwrap();
        let froz = forward(&net, &params, &frozen, &x).unwrap();
        assert_eq!(live.data(), froz.data());
    }

    #[test]
    fn gated_head_linear_in_last_layer() {
        let net = NetworkSpec::gated(vec![2, 5, 4, 3], 100.0, 5.0).unwrap();
        let params = init_params(&net, &mut stream(2, Stream::Init));
        let x = Matrix::from_rows(&[vec![0.3, -1.2], vec![0.9, 0.1]]).unwrap();
        let base = forward(&net, &params, &GateState::live(), &x).unwrap();
        let mut scaled = params.clone();
        let gl = scaled.layout.gated.clone().unwrap();
        for r in &gl.w_h {
            for k in r.clone() {
                scaled.theta[k] *= 3.5;
            }
        }
        let out = forward(&net, &scaled, &GateState::live(), &x).unwrap();
        for (a, b) in base.data().iter().zip(out.data()) {
            assert_relative_eq!(3.5 * a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn frozen_gate_linear_in_penultimate_layer() {
        let net = NetworkSpec::gated(vec![2, 5, 4, 1], 100.0, 5.0).unwrap();
        let p0 = init_params(&net, &mut stream(11, Stream::Init));
        let gates = GateState::freeze(&net, &p0).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -1.2], vec![0.9, 0.1]]).unwrap();
        let gl = p0.layout.gated.clone().unwrap();
        let range = gl.w_hm1[0].clone();

        let mut pa = p0.clone();
        let mut pb = p0.clone();
        let mut rng = stream(12, Stream::Probe);
        let da: Vec<f64> = crate::rng::normal_vec(&mut rng, range.len());
        let db: Vec<f64> = crate::rng::normal_vec(&mut rng, range.len());
        for (k, off) in range.clone().enumerate() {
            pa.theta[off] = da[k];
            pb.theta[off] = db[k];
        }
        let fa = forward(&net, &pa, &gates, &x).unwrap();
        let fb = forward(&net, &pb, &gates, &x).unwrap();
        // Additivity: f(a + b) = f(a) + f(b) for the head block (the map has
        // no constant term in that block).
        let mut pc = p0.clone();
        for (k, off) in range.clone().enumerate() {
            pc.theta[off] = da[k] + db[k];
        }
        let fc = forward(&net, &pc, &gates, &x).unwrap();
        for i in 0..2 {
            assert_relative_eq!(
                fc.at(i, 0),
                fa.at(i, 0) + fb.at(i, 0),
                epsilon = 1e-10,
                max_relative = 1e-10
            );
        }
        // Homogeneity.
        let mut pd = p0.clone();
        for (k, off) in range.clone().enumerate() {
            pd.theta[off] = 2.5 * da[k];
        }
        let fd = forward(&net, &pd, &gates, &x).unwrap();
        for i in 0..2 {
            assert_relative_eq!(fd.at(i, 0), 2.5 * fa.at(i, 0), epsilon = 1e-10);
        }
    }
}
