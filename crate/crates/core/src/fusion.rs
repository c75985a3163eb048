//! Fusion of temporal features across channels: a pre-norm transformer
//! block whose attention is restricted by the channel mask, followed by the
//! linear forecasting head.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::channel::ChannelMask;
use crate::error::{shape_mismatch, DuetError, Result};
use crate::linalg::softmax_rows;

/// Additive stand-in for `-∞` on masked attention scores.
pub const MASK_NEG: f64 = -1e9;
/// LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    /// `d × d_ff`
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    /// `d_ff × d`
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
}

impl FusionParams {
    /// All-zero weights with unit LayerNorm gains.
    pub fn zeros(hidden: usize, ffn_hidden: usize) -> Self {
        Self {
            wq: Array2::zeros((hidden, hidden)),
            wk: Array2::zeros((hidden, hidden)),
            wv: Array2::zeros((hidden, hidden)),
            ln1_gain: Array1::ones(hidden),
            ln1_bias: Array1::zeros(hidden),
            ln2_gain: Array1::ones(hidden),
            ln2_bias: Array1::zeros(hidden),
            ffn_w1: Array2::zeros((hidden, ffn_hidden)),
            ffn_b1: Array1::zeros(ffn_hidden),
            ffn_w2: Array2::zeros((ffn_hidden, hidden)),
            ffn_b2: Array1::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wq.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    /// `d × F`
    pub wo: Array2<f64>,
}

/// Output of the fusion block, `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub values: Array2<f64>,
}

pub(crate) struct AttentionTrace {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    scaled: Array2<f64>,
    weights: Array2<f64>,
}

struct LayerNormTrace {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) struct BlockTrace {
    ln1: LayerNormTrace,
    attention: AttentionTrace,
    ln2: LayerNormTrace,
    v2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn layer_norm(x: ArrayView2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LayerNormTrace) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    let out = &xhat * gain + bias;
    (out, LayerNormTrace { xhat, inv_std })
}

fn layer_norm_backward(
    tr: &LayerNormTrace,
    d_out: &Array2<f64>,
    gain: &Array1<f64>,
    g_gain: &mut Array1<f64>,
    g_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *g_gain += &(d_out * &tr.xhat).sum_axis(Axis(0));
    *g_bias += &d_out.sum_axis(Axis(0));
    let d_xhat = d_out * gain;
    let d = d_xhat.ncols() as f64;
    let mut d_x = Array2::zeros(d_xhat.dim());
    for (((mut dx, dxh), xh), &inv) in d_x
        .rows_mut()
        .into_iter()
        .zip(d_xhat.rows())
        .zip(tr.xhat.rows())
        .zip(&tr.inv_std)
    {
        let mean_d = dxh.sum() / d;
        let mean_dx = dxh.dot(&xh) / d;
        for ((o, &g), &h) in dx.iter_mut().zip(dxh).zip(xh) {
            *o = inv * (g - mean_d - h * mean_dx);
        }
    }
    d_x
}

fn check_mask(x: ArrayView2<f64>, mask: &ChannelMask) -> Result<()> {
    let n = x.nrows();
    if mask.hard.dim() != (n, n) {
        return Err(shape_mismatch("channel mask", (n, n), mask.hard.dim()));
    }
    for (i, row) in mask.hard.rows().into_iter().enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            return Err(DuetError::DeadRow(i));
        }
    }
    Ok(())
}

fn attention_traced(x: ArrayView2<f64>, mask: &ChannelMask, p: &FusionParams) -> Result<(Array2<f64>, AttentionTrace)> {
    check_mask(x, mask)?;
    let d = p.hidden();
    if x.ncols() != d {
        return Err(shape_mismatch("attention input width", d, x.ncols()));
    }
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let scaled = q.dot(&k.t()) / (d as f64).sqrt();
    let m = &mask.hard;
    let mut weights = Array2::from_shape_fn(scaled.dim(), |(i, j)| {
        scaled[[i, j]] * m[[i, j]] + (1.0 - m[[i, j]]) * MASK_NEG
    });
    softmax_rows(&mut weights);
    let out = weights.dot(&v);
    Ok((
        out,
        AttentionTrace {
            x: x.to_owned(),
            q,
            k,
            v,
            scaled,
            weights,
        },
    ))
}

/// Single-head attention over channels; masked pairs get weight zero.
pub fn masked_attention(x_temp: ArrayView2<f64>, mask: &ChannelMask, params: &FusionParams) -> Result<Array2<f64>> {
    Ok(attention_traced(x_temp, mask, params)?.0)
}

/// Row-stochastic attention weights, for inspection.
pub fn attention_weights(x_temp: ArrayView2<f64>, mask: &ChannelMask, params: &FusionParams) -> Result<Array2<f64>> {
    Ok(attention_traced(x_temp, mask, params)?.1.weights)
}

/// Returns `(∂L/∂x, ∂L/∂mask)`.
fn attention_backward(tr: &AttentionTrace, mask: &ChannelMask, d_out: &Array2<f64>, p: &FusionParams, g: &mut FusionParams) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (p.hidden() as f64).sqrt();
    let d_weights = d_out.dot(&tr.v.t());
    let d_v = tr.weights.t().dot(d_out);
    let mut d_scores = Array2::zeros(d_weights.dim());
    for ((mut ds, w), dw) in d_scores
        .rows_mut()
        .into_iter()
        .zip(tr.weights.rows())
        .zip(d_weights.rows())
    {
        let inner = w.dot(&dw);
        for ((o, &wi), &dwi) in ds.iter_mut().zip(w).zip(dw) {
            *o = wi * (dwi - inner);
        }
    }
    let m = &mask.hard;
    let d_scaled = &d_scores * m;
    let d_mask = &d_scores * &(&tr.scaled - MASK_NEG);
    let d_q = d_scaled.dot(&tr.k) * scale;
    let d_k = d_scaled.t().dot(&tr.q) * scale;
    general_mat_mul(1.0, &tr.x.t(), &d_q, 1.0, &mut g.wq);
    general_mat_mul(1.0, &tr.x.t(), &d_k, 1.0, &mut g.wk);
    general_mat_mul(1.0, &tr.x.t(), &d_v, 1.0, &mut g.wv);
    let d_x = d_q.dot(&p.wq.t()) + d_k.dot(&p.wk.t()) + d_v.dot(&p.wv.t());
    (d_x, d_mask)
}

pub(crate) fn fusion_block_traced(x_temp: ArrayView2<f64>, mask: &ChannelMask, p: &FusionParams) -> Result<(FusedFeature, BlockTrace)> {
    let (u, ln1) = layer_norm(x_temp, &p.ln1_gain, &p.ln1_bias);
    let (att, attention) = attention_traced(u.view(), mask, p)?;
    let h = &x_temp + &att;
    let (v2, ln2) = layer_norm(h.view(), &p.ln2_gain, &p.ln2_bias);
    let pre_act = v2.dot(&p.ffn_w1) + &p.ffn_b1;
    let act = pre_act.mapv(gelu);
    let ffn = act.dot(&p.ffn_w2) + &p.ffn_b2;
    let values = h + ffn;
    Ok((
        FusedFeature { values },
        BlockTrace {
            ln1,
            attention,
            ln2,
            v2,
            pre_act,
            act,
        },
    ))
}

/// `h = x + Attn(LN1(x))`, `out = h + FFN(LN2(h))`.
pub fn fusion_block(x_temp: ArrayView2<f64>, mask: &ChannelMask, params: &FusionParams) -> Result<FusedFeature> {
    Ok(fusion_block_traced(x_temp, mask, params)?.0)
}

/// Returns `(∂L/∂x_temp, ∂L/∂mask)` and accumulates parameter gradients.
pub(crate) fn fusion_block_backward(tr: &BlockTrace, mask: &ChannelMask, d_out: &Array2<f64>, p: &FusionParams, g: &mut FusionParams) -> (Array2<f64>, Array2<f64>) {
    // out = h + act·W2 + b2
    g.ffn_b2 += &d_out.sum_axis(Axis(0));
    general_mat_mul(1.0, &tr.act.t(), d_out, 1.0, &mut g.ffn_w2);
    let d_act = d_out.dot(&p.ffn_w2.t());
    let d_pre = &d_act * &tr.pre_act.mapv(gelu_grad);
    g.ffn_b1 += &d_pre.sum_axis(Axis(0));
    general_mat_mul(1.0, &tr.v2.t(), &d_pre, 1.0, &mut g.ffn_w1);
    let d_v2 = d_pre.dot(&p.ffn_w1.t());
    let d_h = d_out + &layer_norm_backward(&tr.ln2, &d_v2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    let (d_u, d_mask) = attention_backward(&tr.attention, mask, &d_h, p, g);
    let d_x = &d_h + &layer_norm_backward(&tr.ln1, &d_u, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    (d_x, d_mask)
}

/// `Ŷ = X_mix · WO` (normalized scale).
pub fn predict(x_mix: &FusedFeature, params: &PredictorParams) -> Result<Array2<f64>> {
    if x_mix.values.ncols() != params.wo.nrows() {
        return Err(shape_mismatch("predictor input width", params.wo.nrows(), x_mix.values.ncols()));
    }
    Ok(x_mix.values.dot(&params.wo))
}
