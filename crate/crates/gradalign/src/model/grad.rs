//! Analytic gradients and the full output Jacobian.
//!
//! `loss_gradient` is reverse-mode through every layer, including through
//! live gates; frozen gate matrices are constants and receive no gradient
//! (but the gate values still vary with the lower layers, and that path is
//! differentiated). `jacobian` materializes `d vec(f_X) / d theta` with the
//! column-stacking convention: row `j*n + i` holds the gradient of
//! `f(x_i)_j`.

use super::forward::{forward_cached, ForwardCache, GateState};
use super::{HeadMode, NetworkSpec, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{loss_grad, sigmoid, LossKind};
use rayon::prelude::*;

/// Default cap on materialized Jacobian entries (floats).
pub const DEFAULT_JACOBIAN_CAP: usize = 1 << 28;

fn take_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_raw(idx.len(), m.cols(), data)
}

/// Derivative of the softplus with the given sharpness.
#[inline]
fn softplus_prime(a: f64, sharpness: f64) -> f64 {
    sigmoid(sharpness * a)
}

/// `A^T * B` accumulated into `out` (row-major `a.cols x b.cols`).
fn accumulate_at_b(a: &Matrix, b: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(a.rows(), b.rows());
    debug_assert_eq!(out.len(), a.cols() * b.cols());
    let bc = b.cols();
    for i in 0..a.rows() {
        let arow = a.row(i);
        let brow = b.row(i);
        for (k, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[k * bc..(k + 1) * bc];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Backpropagates `d` (gradient in the final plain activation) down the
/// plain layers `1..=upto`, accumulating weight/bias gradients into `grad`.
fn backward_plain_layers(
    net: &NetworkSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    upto: usize,
    mut d: Matrix,
    grad: &mut [f64],
) {
    let w = &net.layer_widths;
    let theta = &params.theta;
    let layout = &params.layout;
    for l in (1..=upto).rev() {
        let range = layout.layer_ranges[l - 1].clone();
        let wlen = w[l] * w[l - 1];
        let h_prev = if l == 1 { &cache.x } else { &cache.hidden[l - 2] };
        accumulate_at_b(&d, h_prev, &mut grad[range.start..range.start + wlen]);
        if net.bias {
            let bgrad = &mut grad[range.start + wlen..range.end];
            for i in 0..d.rows() {
                for (bg, &dv) in bgrad.iter_mut().zip(d.row(i)) {
                    *bg += dv;
                }
            }
        }
        if l > 1 {
            let wslice = &theta[range.start..range.start + wlen];
            let n = d.rows();
            let mut nd = vec![0.0; n * w[l - 1]];
            for i in 0..n {
                let drow = d.row(i);
                let ndrow = &mut nd[i * w[l - 1]..(i + 1) * w[l - 1]];
                for (k, &dv) in drow.iter().enumerate() {
                    if dv != 0.0 {
                        let wrow = &wslice[k * w[l - 1]..(k + 1) * w[l - 1]];
                        for (o, &wv) in ndrow.iter_mut().zip(wrow) {
                            *o += dv * wv;
                        }
                    }
                }
                let arow = cache.preact[l - 2].row(i);
                for (o, &av) in ndrow.iter_mut().zip(arow) {
                    *o *= softplus_prime(av, net.softplus_sharpness);
                }
            }
            d = Matrix::from_raw(n, w[l - 1], nd);
        }
    }
}

/// Gradient in `z` propagated into the lower plain layers (gated mode).
fn backward_from_z(
    net: &NetworkSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    dz: &Matrix,
    grad: &mut [f64],
) {
    let h = net.depth();
    if h == 2 {
        return; // z = [x | 1]; nothing below.
    }
    let n = dz.rows();
    let zbar_w = net.m_hm1() - 1;
    // Drop the constant column, multiply by the top activation derivative.
    let mut d = vec![0.0; n * zbar_w];
    for i in 0..n {
        let arow = cache.preact[h - 3].row(i);
        let drow = dz.row(i);
        for k in 0..zbar_w {
            d[i * zbar_w + k] = drow[k] * softplus_prime(arow[k], net.softplus_sharpness);
        }
    }
    backward_plain_layers(
        net,
        params,
        cache,
        h - 2,
        Matrix::from_raw(n, zbar_w, d),
        grad,
    );
}

/// Exact analytic gradient of the mean loss over the batch.
///
/// `batch = None` means the full dataset order `0..n`.
pub fn loss_gradient(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    x: &Matrix,
    y: &Matrix,
    kind: LossKind,
    batch: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let full: Vec<usize>;
    let idx: &[usize] = match batch {
        Some(b) => {
            if b.is_empty() {
                return Err(Error::Contract {
                    op: "loss_gradient",
                    msg: "empty batch".into(),
                });
            }
            b
        }
        None => {
            full = (0..x.rows()).collect();
            &full
        }
    };
    let xb = take_rows(x, idx);
    let yb = take_rows(y, idx);
    let cache = forward_cached(net, params, gates, &xb)?;
    let nb = idx.len() as f64;
    let mut dout = Matrix::zeros(xb.rows(), net.output_dim());
    for i in 0..xb.rows() {
        let g = loss_grad(kind, cache.out.row(i), yb.row(i))?;
        for (j, gv) in g.iter().enumerate() {
            *dout.at_mut(i, j) = gv / nb;
        }
    }
    let mut grad = vec![0.0; params.layout.dim];
    backward_output_seed(net, params, gates, &cache, &dout, &mut grad);
    Ok(grad)
}

/// Shared backward pass from a gradient seed on the network output.
fn backward_output_seed(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    cache: &ForwardCache,
    dout: &Matrix,
    grad: &mut [f64],
) {
    let h = net.depth();
    match net.head_mode {
        HeadMode::Plain => {
            backward_plain_layers(net, params, cache, h, dout.clone(), grad);
        }
        HeadMode::Gated => {
            let (m_y, m_h, m_hm1) = (net.output_dim(), net.m_h(), net.m_hm1());
            let n = dout.rows();
            let z = cache.z.as_ref().unwrap();
            let gl = params.layout.gated.as_ref().unwrap();
            let sp = net.gate_sharpness;
            let mut dz = Matrix::zeros(n, m_hm1);
            for j in 0..m_y {
                let w_hj = &params.theta[gl.w_h[j].clone()];
                let u = &cache.u[j];
                let s = &cache.gate_sig[j];
                // Gradient in the last-layer row: sum_i dout_ij * (s .* u)_i.
                {
                    let gslice = &mut grad[gl.w_h[j].clone()];
                    for i in 0..n {
                        let dv = dout.at(i, j);
                        if dv != 0.0 {
                            for k in 0..m_h {
                                gslice[k] += dv * s.at(i, k) * u.at(i, k);
                            }
                        }
                    }
                }
                // Gradient in u (and the gate argument when live).
                let mut du = Matrix::zeros(n, m_h);
                let mut dgate: Option<Matrix> = match gates {
                    GateState::Live => None,
                    GateState::Frozen(_) => Some(Matrix::zeros(n, m_h)),
                };
                for i in 0..n {
                    let dv = dout.at(i, j);
                    if dv == 0.0 {
                        continue;
                    }
                    for k in 0..m_h {
                        let sv = s.at(i, k);
                        let uv = u.at(i, k);
                        let dp = dv * w_hj[k];
                        match &mut dgate {
                            None => {
                                // Live: gate argument is u itself.
                                *du.at_mut(i, k) += dp * (sv + sp * sv * (1.0 - sv) * uv);
                            }
                            Some(dg) => {
                                *du.at_mut(i, k) += dp * sv;
                                *dg.at_mut(i, k) += dp * sp * sv * (1.0 - sv) * uv;
                            }
                        }
                    }
                }
                // Penultimate weight gradient: du^T Z (frozen gates receive
                // no gradient).
                accumulate_at_b(&du, z, &mut grad[gl.w_hm1[j].clone()]);
                // Into z.
                let wj = &params.theta[gl.w_hm1[j].clone()];
                for i in 0..n {
                    let durow = du.row(i);
                    let dzrow = dz.row_mut(i);
                    for (k, &dv) in durow.iter().enumerate() {
                        if dv != 0.0 {
                            let wrow = &wj[k * m_hm1..(k + 1) * m_hm1];
                            for (o, &wv) in dzrow.iter_mut().zip(wrow) {
                                *o += dv * wv;
                            }
                        }
                    }
                }
                if let (Some(dg), GateState::Frozen(rs)) = (&dgate, gates) {
                    let r = &rs[j];
                    for i in 0..n {
                        let dgrow = dg.row(i);
                        let dzrow = dz.row_mut(i);
                        for (k, &dv) in dgrow.iter().enumerate() {
                            if dv != 0.0 {
                                for (o, &rv) in dzrow.iter_mut().zip(r.row(k)) {
                                    *o += dv * rv;
                                }
                            }
                        }
                    }
                }
            }
            backward_from_z(net, params, cache, &dz, grad);
        }
    }
}

/// Full output Jacobian with the default materialization cap.
pub fn jacobian(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    x: &Matrix,
) -> Result<Matrix> {
    jacobian_with_cap(net, params, gates, x, DEFAULT_JACOBIAN_CAP)
}

/// Full output Jacobian, refusing to materialize more than `cap` floats.
/// Row `j*n + i` is the gradient of `f(x_i)_j` with respect to all of theta.
pub fn jacobian_with_cap(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    x: &Matrix,
    cap: usize,
) -> Result<Matrix> {
    let n = x.rows();
    let m_y = net.output_dim();
    let d = params.layout.dim;
    let required = n * m_y * d;
    if required > cap {
        return Err(Error::SizeExceeded {
            op: "jacobian",
            required,
            cap,
        });
    }
    let cache = forward_cached(net, params, gates, x)?;
    let mut jac = Matrix::zeros(n * m_y, d);

    for j in 0..m_y {
        let deltas = per_sample_deltas(net, params, gates, &cache, j);
        let rows_base = j * n;
        let jac_cols = d;
        // Rows are disjoint; fill them in parallel.
        let data = jac.data_mut();
        data[rows_base * jac_cols..(rows_base + n) * jac_cols]
            .par_chunks_mut(jac_cols)
            .enumerate()
            .for_each(|(i, row)| {
                fill_jacobian_row(net, params, gates, &cache, &deltas, i, j, row);
            });
    }
    Ok(jac)
}

/// Per-sample backward state for one output coordinate.
struct Deltas {
    /// Gated: gradient of f_j in u (n x m_H).
    du: Option<Matrix>,
    /// Plain: gradient in the pre-activation of each hidden layer, top-down
    /// list indexed by layer-1. Entry `l-1` has width `w[l]`.
    plain: Vec<Matrix>,
}

fn per_sample_deltas(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    cache: &ForwardCache,
    j: usize,
) -> Deltas {
    let h = net.depth();
    let w = &net.layer_widths;
    let n = cache.x.rows();
    let theta = &params.theta;
    match net.head_mode {
        HeadMode::Plain => {
            // delta at hidden layer h-1: W_H[j,:] .* sp'(a_{H-1});
            // then propagate down.
            let mut plain: Vec<Matrix> = vec![Matrix::zeros(0, 0); h.saturating_sub(1)];
            if h >= 2 {
                let range = params.layout.layer_ranges[h - 1].clone();
                let wlen = w[h] * w[h - 1];
                let w_last = &theta[range.start..range.start + wlen];
                let wrow = &w_last[j * w[h - 1]..(j + 1) * w[h - 1]];
                let mut d = vec![0.0; n * w[h - 1]];
                for i in 0..n {
                    let arow = cache.preact[h - 2].row(i);
                    for k in 0..w[h - 1] {
                        d[i * w[h - 1] + k] =
                            wrow[k] * softplus_prime(arow[k], net.softplus_sharpness);
                    }
                }
                plain[h - 2] = Matrix::from_raw(n, w[h - 1], d);
                for l in (1..h - 1).rev() {
                    let range = params.layout.layer_ranges[l].clone();
                    let wlen = w[l + 1] * w[l];
                    let wslice = &theta[range.start..range.start + wlen];
                    let upper = &plain[l];
                    let mut d = vec![0.0; n * w[l]];
                    for i in 0..n {
                        let urow = upper.row(i);
                        let drow = &mut d[i * w[l]..(i + 1) * w[l]];
                        for (k, &uv) in urow.iter().enumerate() {
                            if uv != 0.0 {
                                let wr = &wslice[k * w[l]..(k + 1) * w[l]];
                                for (o, &wv) in drow.iter_mut().zip(wr) {
                                    *o += uv * wv;
                                }
                            }
                        }
                        let arow = cache.preact[l - 1].row(i);
                        for (o, &av) in drow.iter_mut().zip(arow) {
                            *o *= softplus_prime(av, net.softplus_sharpness);
                        }
                    }
                    plain[l - 1] = Matrix::from_raw(n, w[l], d);
                }
            }
            Deltas { du: None, plain }
        }
        HeadMode::Gated => {
            let (m_h, m_hm1) = (net.m_h(), net.m_hm1());
            let gl = params.layout.gated.as_ref().unwrap();
            let w_hj = &theta[gl.w_h[j].clone()];
            let u = &cache.u[j];
            let s = &cache.gate_sig[j];
            let sp = net.gate_sharpness;
            let mut du = Matrix::zeros(n, m_h);
            let mut dz = Matrix::zeros(n, m_hm1);
            let frozen = gates.frozen_matrices();
            for i in 0..n {
                for k in 0..m_h {
                    let sv = s.at(i, k);
                    let uv = u.at(i, k);
                    match frozen {
                        None => {
                            *du.at_mut(i, k) = w_hj[k] * (sv + sp * sv * (1.0 - sv) * uv);
                        }
                        Some(_) => {
                            *du.at_mut(i, k) = w_hj[k] * sv;
                        }
                    }
                }
            }
            // dz = du * W_j (+ dgate * R_j when frozen).
            let wj = &theta[gl.w_hm1[j].clone()];
            for i in 0..n {
                let durow = du.row(i);
                let dzrow = dz.row_mut(i);
                for (k, &dv) in durow.iter().enumerate() {
                    if dv != 0.0 {
                        let wr = &wj[k * m_hm1..(k + 1) * m_hm1];
                        for (o, &wv) in dzrow.iter_mut().zip(wr) {
                            *o += dv * wv;
                        }
                    }
                }
            }
            if let Some(rs) = frozen {
                let r = &rs[j];
                for i in 0..n {
                    let dzrow = dz.row_mut(i);
                    for k in 0..m_h {
                        let sv = s.at(i, k);
                        let uv = u.at(i, k);
                        let dg = w_hj[k] * sp * sv * (1.0 - sv) * uv;
                        if dg != 0.0 {
                            for (o, &rv) in dzrow.iter_mut().zip(r.row(k)) {
                                *o += dg * rv;
                            }
                        }
                    }
                }
            }
            // Propagate dz into the lower plain layers to get their deltas.
            let mut plain: Vec<Matrix> = vec![Matrix::zeros(0, 0); h.saturating_sub(2)];
            if h > 2 {
                let zbar_w = m_hm1 - 1;
                let mut d = vec![0.0; n * zbar_w];
                for i in 0..n {
                    let arow = cache.preact[h - 3].row(i);
                    let dzrow = dz.row(i);
                    for k in 0..zbar_w {
                        d[i * zbar_w + k] =
                            dzrow[k] * softplus_prime(arow[k], net.softplus_sharpness);
                    }
                }
                plain[h - 3] = Matrix::from_raw(n, zbar_w, d);
                for l in (1..h - 2).rev() {
                    let range = params.layout.layer_ranges[l].clone();
                    let wlen = w[l + 1] * w[l];
                    let wslice = &theta[range.start..range.start + wlen];
                    let upper = &plain[l];
                    let mut d = vec![0.0; n * w[l]];
                    for i in 0..n {
                        let urow = upper.row(i);
                        let drow = &mut d[i * w[l]..(i + 1) * w[l]];
                        for (k, &uv) in urow.iter().enumerate() {
                            if uv != 0.0 {
                                let wr = &wslice[k * w[l]..(k + 1) * w[l]];
                                for (o, &wv) in drow.iter_mut().zip(wr) {
                                    *o += uv * wv;
                                }
                            }
                        }
                        let arow = cache.preact[l - 1].row(i);
                        for (o, &av) in drow.iter_mut().zip(arow) {
                            *o *= softplus_prime(av, net.softplus_sharpness);
                        }
                    }
                    plain[l - 1] = Matrix::from_raw(n, w[l], d);
                }
            }
            Deltas {
                du: Some(du),
                plain,
            }
        }
    }
}

fn fill_jacobian_row(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    cache: &ForwardCache,
    deltas: &Deltas,
    i: usize,
    j: usize,
    row: &mut [f64],
) {
    let h = net.depth();
    let w = &net.layer_widths;
    let layout = &params.layout;
    let _ = gates;
    match net.head_mode {
        HeadMode::Plain => {
            // Last layer: d f_j / d W_H[j', :] = delta_{j j'} h_{H-1}.
            let range = layout.layer_ranges[h - 1].clone();
            let wlen = w[h] * w[h - 1];
            let h_prev = if h == 1 { &cache.x } else { &cache.hidden[h - 2] };
            let base = range.start + j * w[h - 1];
            row[base..base + w[h - 1]].copy_from_slice(h_prev.row(i));
            if net.bias {
                row[range.start + wlen + j] = 1.0;
            }
            for l in (1..h).rev() {
                let range = layout.layer_ranges[l - 1].clone();
                let wlen = w[l] * w[l - 1];
                let d = deltas.plain[l - 1].row(i);
                let h_prev = if l == 1 { &cache.x } else { &cache.hidden[l - 2] };
                let hrow = h_prev.row(i);
                let slab = &mut row[range.start..range.start + wlen];
                for (k, &dv) in d.iter().enumerate() {
                    if dv != 0.0 {
                        let orow = &mut slab[k * w[l - 1]..(k + 1) * w[l - 1]];
                        for (o, &hv) in orow.iter_mut().zip(hrow) {
                            *o = dv * hv;
                        }
                    }
                }
                if net.bias {
                    row[range.start + wlen..range.end].copy_from_slice(d);
                }
            }
        }
        HeadMode::Gated => {
            let (m_h, m_hm1) = (net.m_h(), net.m_hm1());
            let gl = layout.gated.as_ref().unwrap();
            // Last layer block (output j only): (s .* u)_i.
            {
                let r = gl.w_h[j].clone();
                let s = &cache.gate_sig[j];
                let u = &cache.u[j];
                let slab = &mut row[r];
                for k in 0..m_h {
                    slab[k] = s.at(i, k) * u.at(i, k);
                }
            }
            // Penultimate block (output j only): outer(du_i, z_i).
            {
                let du = deltas.du.as_ref().unwrap().row(i);
                let z = cache.z.as_ref().unwrap().row(i);
                let slab = &mut row[gl.w_hm1[j].clone()];
                for (k, &dv) in du.iter().enumerate() {
                    if dv != 0.0 {
                        let orow = &mut slab[k * m_hm1..(k + 1) * m_hm1];
                        for (o, &zv) in orow.iter_mut().zip(z) {
                            *o = dv * zv;
                        }
                    }
                }
            }
            // Lower plain layers.
            for l in (1..h - 1).rev() {
                let range = layout.layer_ranges[l - 1].clone();
                let wlen = w[l] * w[l - 1];
                let d = deltas.plain[l - 1].row(i);
                let h_prev = if l == 1 { &cache.x } else { &cache.hidden[l - 2] };
                let hrow = h_prev.row(i);
                let slab = &mut row[range.start..range.start + wlen];
                for (k, &dv) in d.iter().enumerate() {
                    if dv != 0.0 {
                        let orow = &mut slab[k * w[l - 1]..(k + 1) * w[l - 1]];
                        for (o, &hv) in orow.iter_mut().zip(hrow) {
                            *o = dv * hv;
                        }
                    }
                }
                if net.bias {
                    row[range.start + wlen..range.end].copy_from_slice(d);
                }
            }
        }
    }
}

/// The parameter vector masked to the structure set `S`.
pub fn nu_vector(params: &ParamVector) -> Vec<f64> {
    let mut nu = vec![0.0; params.layout.dim];
    let s = params.layout.structure_set.clone();
    nu[s.clone()].copy_from_slice(&params.theta[s]);
    nu
}

/// Reconstructs the output of a single input from the structure set:
/// `sum_{k in S} theta_k * d f(x)/d theta_k`. Under the common-structure
/// property this equals the forward output.
pub fn common_structure_reconstruct(
    net: &NetworkSpec,
    params: &ParamVector,
    gates: &GateState,
    x: &[f64],
) -> Result<Vec<f64>> {
    let xm = Matrix::new(1, x.len(), x.to_vec())?;
    let jac = jacobian(net, params, gates, &xm)?;
    let s = params.layout.structure_set.clone();
    let m_y = net.output_dim();
    let mut out = vec![0.0; m_y];
    for (j, o) in out.iter_mut().enumerate() {
        let row = jac.row(j); // n = 1, so row j*1+0 = j
        let mut acc = 0.0;
        for k in s.clone() {
            acc += params.theta[k] * row[k];
        }
        *o = acc;
    }
    Ok(out)
}
