use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};

use super::{Layout, LstmParams, Normalizer, Tensor};
use crate::error::{Error, Result};
use crate::ssm::Label;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dot product with four independent partial sums, which lets the compiler
/// use SIMD lanes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a4.zip(b4) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Everything the backward pass needs. Steps are 1-based in the accessors;
/// hidden and cell state 0 are the zero initial state.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub layout: Layout,
    pub t: usize,
    inputs: Vec<f64>,
    /// Activated gates per step, `4 n_h` values in the order i, f, o, c̃.
    gates: Vec<f64>,
    cells: Vec<f64>,
    hidden: Vec<f64>,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
    pub log_probs: [f64; 2],
}

impl ForwardCache {
    fn gate_block(&self, k: usize, g: usize) -> &[f64] {
        let n = self.layout.n_h;
        let s = (k - 1) * 4 * n + g * n;
        &self.gates[s..s + n]
    }

    pub fn input_gate(&self, k: usize) -> &[f64] {
        self.gate_block(k, 0)
    }

    pub fn forget_gate(&self, k: usize) -> &[f64] {
        self.gate_block(k, 1)
    }

    pub fn output_gate(&self, k: usize) -> &[f64] {
        self.gate_block(k, 2)
    }

    pub fn candidate(&self, k: usize) -> &[f64] {
        self.gate_block(k, 3)
    }

    pub fn cell(&self, k: usize) -> &[f64] {
        let n = self.layout.n_h;
        &self.cells[k * n..(k + 1) * n]
    }

    pub fn hidden(&self, k: usize) -> &[f64] {
        let n = self.layout.n_h;
        &self.hidden[k * n..(k + 1) * n]
    }

    /// Normalized input at step `k`.
    pub fn input(&self, k: usize) -> &[f64] {
        let m = self.layout.m_z;
        &self.inputs[(k - 1) * m..k * m]
    }
}

pub fn forward(params: &LstmParams, norm: &Normalizer, obs: &[DVector<f64>]) -> Result<ForwardCache> {
    if norm.dim() != params.m_z() {
        return Err(Error::Dimension(format!(
            "normalizer has {} channels, network expects {}",
            norm.dim(),
            params.m_z()
        )));
    }
    if obs.is_empty() {
        return Err(Error::InvalidInput("cannot run the network on an empty sequence".into()));
    }
    forward_normalized(params, norm.apply(obs)?)
}

/// Forward pass over pre-normalized inputs flattened step-major.
pub(crate) fn forward_normalized(params: &LstmParams, inputs: Vec<f64>) -> Result<ForwardCache> {
    let layout = params.layout;
    let (n, m) = (layout.n_h, layout.m_z);
    let t = inputs.len() / m;
    let w = &params.values[layout.input_weights()];
    let r = &params.values[layout.recurrent_weights()];
    let b = &params.values[layout.biases()];
    let mut gates = vec![0.0; t * 4 * n];
    let mut cells = vec![0.0; (t + 1) * n];
    let mut hidden = vec![0.0; (t + 1) * n];
    for k in 1..=t {
        let z = &inputs[(k - 1) * m..k * m];
        let (h_prev, h_rest) = hidden.split_at_mut(k * n);
        let h_prev = &h_prev[(k - 1) * n..];
        let a = &mut gates[(k - 1) * 4 * n..k * 4 * n];
        for (row, ((a, wr), rr)) in a.iter_mut().zip(w.chunks_exact(m)).zip(r.chunks_exact(n)).enumerate() {
            let acc = b[row] + dot(wr, z) + dot(rr, h_prev);
            *a = if row < 3 * n { sigmoid(acc) } else { acc.tanh() };
        }
        let (c_prev, c_rest) = cells.split_at_mut(k * n);
        let c_prev = &c_prev[(k - 1) * n..];
        let h_k = &mut h_rest[..n];
        for u in 0..n {
            let (i, f, o, g) = (a[u], a[n + u], a[2 * n + u], a[3 * n + u]);
            let c = f * c_prev[u] + i * g;
            c_rest[u] = c;
            h_k[u] = o * c.tanh();
            if !h_k[u].is_finite() || !c.is_finite() {
                return Err(Error::NumericFault { step: k, what: "non-finite LSTM state".into() });
            }
        }
    }
    let w_out = &params.values[layout.range(Tensor::WOut)];
    let b_out = &params.values[layout.range(Tensor::BOut)];
    let h_t = &hidden[t * n..];
    let mut logits = [b_out[0], b_out[1]];
    for (c, logit) in logits.iter_mut().enumerate() {
        for u in 0..n {
            *logit += w_out[c * n + u] * h_t[u];
        }
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericFault { step: t, what: "non-finite logits".into() });
    }
    let top = logits[0].max(logits[1]);
    let lse = top + ((logits[0] - top).exp() + (logits[1] - top).exp()).ln();
    let log_probs = [logits[0] - lse, logits[1] - lse];
    let probs = [log_probs[0].exp(), log_probs[1].exp()];
    Ok(ForwardCache { layout, t, inputs, gates, cells, hidden, logits, probs, log_probs })
}

/// Cross-entropy `-log p(label)`.
pub fn loss(cache: &ForwardCache, label: Label) -> f64 {
    -cache.log_probs[(label.index() - 1) as usize]
}

/// Gradient of [`loss`] with respect to every parameter, in the flat layout.
pub fn backward(cache: &ForwardCache, params: &LstmParams, label: Label) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.values.len()];
    backward_into(cache, params, label, &mut grad)?;
    Ok(grad)
}

/// Adds the gradient into `grad`.
pub(crate) fn backward_into(cache: &ForwardCache, params: &LstmParams, label: Label, grad: &mut [f64]) -> Result<()> {
    let layout = params.layout;
    if cache.layout != layout || grad.len() != layout.len() {
        return Err(Error::Dimension("forward cache does not match the parameters".into()));
    }
    let (n, m, t) = (layout.n_h, layout.m_z, cache.t);
    let r = &params.values[layout.recurrent_weights()];
    let w_out = &params.values[layout.range(Tensor::WOut)];

    let mut dy = cache.probs;
    dy[(label.index() - 1) as usize] -= 1.0;
    let h_t = cache.hidden(t);
    {
        let g_out = &mut grad[layout.range(Tensor::WOut)];
        for c in 0..2 {
            for u in 0..n {
                g_out[c * n + u] += dy[c] * h_t[u];
            }
        }
    }
    {
        let g_bout = &mut grad[layout.range(Tensor::BOut)];
        g_bout[0] += dy[0];
        g_bout[1] += dy[1];
    }
    let mut dh: Vec<f64> = (0..n).map(|u| w_out[u] * dy[0] + w_out[n + u] * dy[1]).collect();
    let mut dc = vec![0.0; n];
    // Gate pre-activation gradients of every step, one column per step.
    let mut d_gates = DMatrix::<f64>::zeros(4 * n, t);
    for k in (1..=t).rev() {
        let (i, f, o, g) = (cache.input_gate(k), cache.forget_gate(k), cache.output_gate(k), cache.candidate(k));
        let c = cache.cell(k);
        let c_prev = cache.cell(k - 1);
        let mut col = d_gates.column_mut(k - 1);
        let da = col.as_mut_slice();
        for u in 0..n {
            let tc = c[u].tanh();
            let d_o = dh[u] * tc;
            dc[u] += dh[u] * o[u] * (1.0 - tc * tc);
            da[u] = dc[u] * g[u] * i[u] * (1.0 - i[u]);
            da[n + u] = dc[u] * c_prev[u] * f[u] * (1.0 - f[u]);
            da[2 * n + u] = d_o * o[u] * (1.0 - o[u]);
            da[3 * n + u] = dc[u] * i[u] * (1.0 - g[u] * g[u]);
            dc[u] *= f[u];
        }
        dh.fill(0.0);
        for (rrow, d) in r.chunks_exact(n).zip(da.iter()) {
            dh.iter_mut().zip(rrow).for_each(|(h, x)| *h += x * d);
        }
    }
    // Row-major weight blocks are the transposes of column-major views, so
    // W^T += Z D^T and R^T += H_prev D^T.
    let inputs = DMatrixView::from_slice(&cache.inputs, m, t);
    let h_prev = DMatrixView::from_slice(&cache.hidden[..t * n], n, t);
    DMatrixViewMut::from_slice(&mut grad[layout.input_weights()], m, 4 * n).gemm(
        1.0,
        &inputs,
        &d_gates.transpose(),
        1.0,
    );
    DMatrixViewMut::from_slice(&mut grad[layout.recurrent_weights()], n, 4 * n).gemm(
        1.0,
        &h_prev,
        &d_gates.transpose(),
        1.0,
    );
    for (g, row) in grad[layout.biases()].iter_mut().zip(d_gates.row_iter()) {
        *g += row.sum();
    }
    Ok(())
}
