//! Temporal clustering: each channel's window is routed to `k` of `M`
//! linear pattern extractors and their features are mixed by the gate.

mod extractor;
mod router;

pub use extractor::{
    aggregate_features, decompose_series, extract_pattern, DecompositionPair, ExtractorParams,
};
pub use router::{encode_distribution, keep_top_k, sample_gate_logits, GateSelection, RouterParams};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_mismatch, Result};
use crate::linalg::{add_outer, relu, sigmoid};
use crate::Mode;
use router::{encode_traced, latent_sample, EncoderTrace};

/// Stacked per-channel temporal features, `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFeature {
    pub values: Array2<f64>,
}

pub(crate) struct ChannelTrace {
    x: Array1<f64>,
    encoder: Option<EncoderTrace>,
    latent: Array1<f64>,
    pair: DecompositionPair,
    gate: GateSelection,
    features: Vec<Array1<f64>>,
}

pub(crate) struct TcmTrace {
    channels: Vec<ChannelTrace>,
}

impl TcmTrace {
    pub(crate) fn gates(&self) -> Vec<GateSelection> {
        self.channels.iter().map(|c| c.gate.clone()).collect()
    }
}

/// Runs the router, the selected extractors and the aggregator on every
/// channel row of `x_norm` independently.
///
/// With `router = None` the cluster must hold one extractor and every gate
/// is fixed to 1. In train mode the gate noise is drawn from `rng`, `M`
/// standard normals per channel in row order; eval mode draws nothing.
pub fn tcm_forward<R: Rng + ?Sized>(
    x_norm: ArrayView2<f64>,
    router: Option<&RouterParams>,
    extractors: &ExtractorParams,
    k: usize,
    kernel: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<(TemporalFeature, Vec<GateSelection>)> {
    let (feature, trace) = tcm_forward_traced(x_norm, router, extractors, k, kernel, mode, rng)?;
    Ok((feature, trace.channels.into_iter().map(|c| c.gate).collect()))
}

pub(crate) fn tcm_forward_traced<R: Rng + ?Sized>(
    x_norm: ArrayView2<f64>,
    router: Option<&RouterParams>,
    extractors: &ExtractorParams,
    k: usize,
    kernel: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<(TemporalFeature, TcmTrace)> {
    let (n, t) = x_norm.dim();
    let m = extractors.experts();
    if let Some(r) = router {
        if r.experts() != m || r.lookback() != t {
            return Err(shape_mismatch(
                "router vs extractors",
                (t, m),
                (r.lookback(), r.experts()),
            ));
        }
    } else if m != 1 {
        return Err(shape_mismatch("routerless cluster size", 1, m));
    }
    let d = extractors.hidden();
    let mut values = Array2::zeros((n, d));
    let mut channels = Vec::with_capacity(n);
    for (row, mut out) in x_norm.rows().into_iter().zip(values.rows_mut()) {
        let (encoder, latent, gate) = match router {
            Some(r) => {
                let enc = encode_traced(row, r)?;
                let eps: Array1<f64> = match mode {
                    Mode::Train => (0..m).map(|_| rng.sample(StandardNormal)).collect(),
                    Mode::Eval => Array1::zeros(m),
                };
                let z = latent_sample(enc.mu.view(), enc.sigma_raw.view(), eps.view());
                let h = r.wh.dot(&z);
                let mut gate = keep_top_k(h.view(), k)?;
                gate.noise = eps.to_vec();
                (Some(enc), z, gate)
            }
            None => (None, Array1::zeros(1), GateSelection::single()),
        };
        let pair = decompose_series(row, kernel)?;
        let features = gate
            .indices
            .iter()
            .map(|&i| extract_pattern(&pair, i, extractors))
            .collect::<Result<Vec<_>>>()?;
        out.assign(&aggregate_features(&features, &gate.weights)?);
        channels.push(ChannelTrace {
            x: row.to_owned(),
            encoder,
            latent,
            pair,
            gate,
            features,
        });
    }
    Ok((TemporalFeature { values }, TcmTrace { channels }))
}

/// Accumulates parameter gradients given `d_out = ∂L/∂X_temp`.
///
/// Gradients reach the router only through the softmax weights of the
/// selected extractors; the selection itself is treated as constant.
pub(crate) fn tcm_backward(
    trace: &TcmTrace,
    d_out: ArrayView2<f64>,
    router: Option<&RouterParams>,
    mut g_router: Option<&mut RouterParams>,
    g_extractors: &mut ExtractorParams,
) {
    for (ch, d_row) in trace.channels.iter().zip(d_out.rows()) {
        let gate = &ch.gate;
        let mut d_weights = Vec::with_capacity(gate.indices.len());
        for ((&i, &w), f) in gate.indices.iter().zip(&gate.weights).zip(&ch.features) {
            d_weights.push(d_row.dot(f));
            add_outer(&mut g_extractors.trend[i], ch.pair.trend.view(), d_row, w);
            add_outer(&mut g_extractors.seasonal[i], ch.pair.seasonal.view(), d_row, w);
        }
        let (Some(r), Some(g), Some(enc)) = (router, g_router.as_deref_mut(), ch.encoder.as_ref())
        else {
            continue;
        };
        // Softmax over the selected logits.
        let inner: f64 = gate.weights.iter().zip(&d_weights).map(|(w, d)| w * d).sum();
        let m = r.experts();
        let mut d_h = Array1::zeros(m);
        for ((&i, &w), &dw) in gate.indices.iter().zip(&gate.weights).zip(&d_weights) {
            d_h[i] = w * (dw - inner);
        }
        add_outer(&mut g.wh, d_h.view(), ch.latent.view(), 1.0);
        let d_z = r.wh.t().dot(&d_h);
        backprop_encoder(
            ch.x.view(),
            &enc.pre_mu,
            &d_z,
            &r.w1_mu,
            &mut g.w0_mu,
            &mut g.w1_mu,
        );
        let eps = ArrayView1::from(&gate.noise[..]);
        if eps.iter().any(|&e| e != 0.0) {
            let d_sigma_raw: Array1<f64> = d_z
                .iter()
                .zip(eps)
                .zip(&enc.sigma_raw)
                .map(|((dz, e), s)| dz * e * sigmoid(*s))
                .collect();
            backprop_encoder(
                ch.x.view(),
                &enc.pre_sigma,
                &d_sigma_raw,
                &r.w1_sigma,
                &mut g.w0_sigma,
                &mut g.w1_sigma,
            );
        }
    }
}

fn backprop_encoder(
    x: ArrayView1<f64>,
    pre: &Array1<f64>,
    d_out: &Array1<f64>,
    w1: &Array2<f64>,
    g_w0: &mut Array2<f64>,
    g_w1: &mut Array2<f64>,
) {
    let hidden = relu(pre);
    add_outer(g_w1, hidden.view(), d_out.view(), 1.0);
    let mut d_hidden = w1.dot(d_out);
    for (dh, &p) in d_hidden.iter_mut().zip(pre) {
        if p <= 0.0 {
            *dh = 0.0;
        }
    }
    add_outer(g_w0, x, d_hidden.view(), 1.0);
}
