//! The assembled forecaster: parameters, the end-to-end forward pass and
//! its gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::channel::{self, ChannelMask, ChannelRelation, ChannelSettings, MaskSettings, MetricParams};
use crate::config::{DuetConfig, MetricKind, VariantKind};
use crate::data::{instance_denormalize, instance_normalize, NormStats};
use crate::error::{shape_mismatch, Result};
use crate::fusion::{self, FusedFeature, FusionParams, PredictorParams};
use crate::temporal::{self, ExtractorParams, GateSelection, RouterParams};
use crate::Mode;

/// Every learnable tensor, grouped by module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub router: Option<RouterParams>,
    pub extractors: ExtractorParams,
    pub metric: MetricParams,
    pub fusion: FusionParams,
    pub predictor: PredictorParams,
}

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

macro_rules! visit_all {
    ($self:ident, $f:ident, $slice:ident, $($amp:tt)*) => {{
        macro_rules! one {
            ($name:expr, $t:expr) => {{
                let shape = $t.shape().to_vec();
                $f($name, &shape, $slice($($amp)* $t));
            }};
        }
        if let Some(r) = $($amp)* $self.router {
            one!("router.w0_mu", r.w0_mu);
            one!("router.w1_mu", r.w1_mu);
            one!("router.w0_sigma", r.w0_sigma);
            one!("router.w1_sigma", r.w1_sigma);
            one!("router.wh", r.wh);
        }
        for (i, (t, s)) in ($($amp)* $self.extractors.trend)
            .into_iter()
            .zip(($($amp)* $self.extractors.seasonal).into_iter())
            .enumerate()
        {
            one!(&format!("extractor.{i}.trend"), *t);
            one!(&format!("extractor.{i}.seasonal"), *s);
        }
        if let Some(a) = $($amp)* $self.metric.a {
            one!("metric.a", *a);
        }
        let fu = $($amp)* $self.fusion;
        one!("fusion.wq", fu.wq);
        one!("fusion.wk", fu.wk);
        one!("fusion.wv", fu.wv);
        one!("fusion.ln1_gain", fu.ln1_gain);
        one!("fusion.ln1_bias", fu.ln1_bias);
        one!("fusion.ln2_gain", fu.ln2_gain);
        one!("fusion.ln2_bias", fu.ln2_bias);
        one!("fusion.ffn_w1", fu.ffn_w1);
        one!("fusion.ffn_b1", fu.ffn_b1);
        one!("fusion.ffn_w2", fu.ffn_w2);
        one!("fusion.ffn_b2", fu.ffn_b2);
        one!("predictor.wo", $self.predictor.wo);
    }};
}

impl ModelParams {
    /// All-zero tensors (unit LayerNorm gains, identity metric) shaped for `cfg`.
    pub fn zeros(cfg: &DuetConfig) -> Self {
        let m = cfg.effective_experts();
        let router = cfg
            .has_router()
            .then(|| RouterParams::zeros(cfg.lookback, cfg.router_hidden, m));
        let metric = if cfg.has_learned_metric() {
            MetricParams::identity(cfg.metric_dim())
        } else {
            MetricParams::fixed(cfg.metric)
        };
        Self {
            router,
            extractors: ExtractorParams::zeros(m, cfg.lookback, cfg.hidden),
            metric,
            fusion: FusionParams::zeros(cfg.hidden, cfg.ffn_hidden),
            predictor: PredictorParams {
                wo: Array2::zeros((cfg.hidden, cfg.horizon)),
            },
        }
    }

    /// Freshly initialized parameters wired for `cfg.variant`.
    ///
    /// Weight matrices are Kaiming-uniform with bound `1/sqrt(fan_in)`,
    /// biases zero, LayerNorm gains one and the metric factor the identity.
    /// Values are rounded to `f32` so checkpoints hold them exactly.
    pub fn init<R: Rng + ?Sized>(cfg: &DuetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg);
        let mut fill = |w: &mut Array2<f64>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
        };
        if let Some(r) = p.router.as_mut() {
            fill(&mut r.w0_mu, cfg.lookback);
            fill(&mut r.w1_mu, cfg.router_hidden);
            fill(&mut r.w0_sigma, cfg.lookback);
            fill(&mut r.w1_sigma, cfg.router_hidden);
            let m = r.wh.ncols();
            fill(&mut r.wh, m);
        }
        for (t, s) in p.extractors.trend.iter_mut().zip(p.extractors.seasonal.iter_mut()) {
            fill(t, cfg.lookback);
            fill(s, cfg.lookback);
        }
        let f = &mut p.fusion;
        fill(&mut f.wq, cfg.hidden);
        fill(&mut f.wk, cfg.hidden);
        fill(&mut f.wv, cfg.hidden);
        fill(&mut f.ffn_w1, cfg.hidden);
        fill(&mut f.ffn_w2, cfg.ffn_hidden);
        fill(&mut p.predictor.wo, cfg.hidden);
        p.round_to_f32();
        Ok(p)
    }

    /// Same structure, every entry zero (a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, _, v| v.fill(0.0));
        z
    }

    /// Visits `(name, shape, values)` in a fixed order.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(&str, &[usize], &'a [f64])) {
        visit_all!(self, f, slice_of, &);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &[usize], &mut [f64])) {
        visit_all!(self, f, slice_of_mut, &mut);
    }

    /// `(name, shape)` of every tensor in visiting order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.for_each_tensor(|n, s, _| out.push((n.to_owned(), s.to_vec())));
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, _, v| n += v.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.for_each_tensor(|_, _, v| out.extend_from_slice(v));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_tensor_mut(|_, _, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
    }

    /// `self += scale · other`; structures must match.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let mut theirs = Vec::new();
        other.for_each_tensor(|_, _, v| theirs.push(v));
        let mut i = 0;
        self.for_each_tensor_mut(|_, _, v| {
            for (a, b) in v.iter_mut().zip(theirs[i]) {
                *a += scale * b;
            }
            i += 1;
        });
    }

    pub fn round_to_f32(&mut self) {
        self.for_each_tensor_mut(|_, _, v| {
            for x in v {
                *x = *x as f32 as f64;
            }
        });
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &DuetConfig) -> Result<()> {
        let want = ModelParams::zeros(cfg).tensor_shapes();
        let have = self.tensor_shapes();
        if want != have {
            let diff = want
                .iter()
                .zip(&have)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} vs {}", a.0, b.0))
                .unwrap_or_else(|| format!("{} vs {} tensors", want.len(), have.len()));
            return Err(shape_mismatch("model parameters", want.len(), diff));
        }
        if self.metric.kind != cfg.metric && cfg.uses_channel_clustering() {
            return Err(shape_mismatch("metric kind", cfg.metric, self.metric.kind));
        }
        Ok(())
    }
}

/// Result of one forward pass over a window.
#[derive(Debug, Clone)]
pub struct Forecast {
    /// Forecast in the scale of the input, `N × F`.
    pub prediction: Array2<f64>,
    /// Forecast before instance denormalization.
    pub normalized: Array2<f64>,
    pub stats: NormStats,
    pub temporal: Array2<f64>,
    pub fused: FusedFeature,
    pub gates: Vec<GateSelection>,
    pub mask: ChannelMask,
    /// Present when the mask came from the channel module.
    pub relation: Option<ChannelRelation>,
}

pub(crate) struct ForwardTrace {
    tcm: temporal::TcmTrace,
    ccm: Option<channel::CcmTrace>,
    block: fusion::BlockTrace,
}

pub fn channel_settings(cfg: &DuetConfig) -> ChannelSettings {
    ChannelSettings {
        gamma: cfg.gamma,
        d_floor: cfg.d_floor,
        mask: MaskSettings {
            temperature: cfg.temperature,
            p_eps: cfg.p_eps,
            threshold: cfg.mask_threshold,
            random: cfg.metric == MetricKind::Random,
        },
        frequency_domain: cfg.uses_frequency_domain(),
    }
}

fn forward_traced<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &DuetConfig,
    mode: Mode,
    rng: &mut R,
    mask_override: Option<&ChannelMask>,
) -> Result<(Forecast, ForwardTrace)> {
    if x.dim() != (cfg.channels, cfg.lookback) {
        return Err(shape_mismatch("input window", (cfg.channels, cfg.lookback), x.dim()));
    }
    let (x_norm, stats) = instance_normalize(x, cfg.std_floor);
    let (temporal, tcm) = temporal::tcm_forward_traced(
        x_norm.view(),
        params.router.as_ref(),
        &params.extractors,
        cfg.effective_top_k(),
        cfg.kernel,
        mode,
        rng,
    )?;
    let (mask, relation, ccm) = match (mask_override, cfg.variant) {
        (Some(m), _) => (m.clone(), None, None),
        (None, VariantKind::NoCcm) => (ChannelMask::identity(cfg.channels), None, None),
        (None, VariantKind::FullAttention) => (ChannelMask::ones(cfg.channels), None, None),
        (None, _) => {
            let (m, rel, tr) = channel::ccm_forward_traced(
                x_norm.view(),
                &params.metric,
                &channel_settings(cfg),
                mode,
                rng,
            )?;
            (m, Some(rel), Some(tr))
        }
    };
    let (fused, block) = fusion::fusion_block_traced(temporal.values.view(), &mask, &params.fusion)?;
    let normalized = fusion::predict(&fused, &params.predictor)?;
    let prediction = instance_denormalize(normalized.view(), &stats)?;
    let trace = ForwardTrace {
        tcm,
        ccm,
        block,
    };
    Ok((
        Forecast {
            prediction,
            normalized,
            stats,
            temporal: temporal.values,
            fused,
            gates: temporal_gates(&trace),
            mask,
            relation,
        },
        trace,
    ))
}

fn temporal_gates(trace: &ForwardTrace) -> Vec<GateSelection> {
    trace.tcm.gates()
}

/// Instance norm, temporal and channel clustering, fusion, prediction and
/// denormalization on one `N × T` window.
///
/// The temporal module consumes `rng` first (train-mode gate noise), then
/// the channel module (mask sampling).
pub fn duet_forward<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &DuetConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Forecast> {
    Ok(forward_traced(x, params, cfg, mode, rng, None)?.0)
}

/// As [`duet_forward`] but with a caller-supplied mask in place of the
/// channel module.
pub fn duet_forward_with_mask<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &DuetConfig,
    mode: Mode,
    rng: &mut R,
    mask: &ChannelMask,
) -> Result<Forecast> {
    Ok(forward_traced(x, params, cfg, mode, rng, Some(mask))?.0)
}

/// Mean absolute error of the forecast against `y` and its gradient.
///
/// The gradient flows through the straight-through mask surrogate in train
/// mode; in eval mode the thresholded mask is constant.
pub fn loss_and_gradient<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &DuetConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, ModelParams)> {
    let mut g = params.zeros_like();
    let loss = accumulate_gradient(x, y, params, cfg, mode, rng, 1.0, &mut g)?;
    Ok((loss, g))
}

/// Adds `scale ·` the gradient of the window's L1 loss into `g` and
/// returns the (unscaled) loss.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_gradient<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    params: &ModelParams,
    cfg: &DuetConfig,
    mode: Mode,
    rng: &mut R,
    scale: f64,
    g: &mut ModelParams,
) -> Result<f64> {
    let (fc, trace) = forward_traced(x, params, cfg, mode, rng, None)?;
    if y.dim() != fc.prediction.dim() {
        return Err(shape_mismatch("target", fc.prediction.dim(), y.dim()));
    }
    let count = y.len() as f64;
    let mut loss = 0.0;
    let mut d_norm = Array2::zeros(y.dim());
    for ((n, f), d) in d_norm.indexed_iter_mut() {
        let r = fc.prediction[[n, f]] - y[[n, f]];
        loss += r.abs();
        // d|r| is taken as 0 at r = 0.
        let sign = if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 };
        *d = scale * sign * fc.stats.std[n] / count;
    }
    loss /= count;

    general_mat_mul(1.0, &fc.fused.values.t(), &d_norm, 1.0, &mut g.predictor.wo);
    let d_mix = d_norm.dot(&params.predictor.wo.t());
    let (d_temp, d_mask) =
        fusion::fusion_block_backward(&trace.block, &fc.mask, &d_mix, &params.fusion, &mut g.fusion);
    temporal::tcm_backward(
        &trace.tcm,
        d_temp.view(),
        params.router.as_ref(),
        g.router.as_mut(),
        &mut g.extractors,
    );
    if let (Some(ccm), Some(rel), Some(g_a)) = (&trace.ccm, &fc.relation, g.metric.a.as_mut()) {
        channel::ccm_backward(ccm, &fc.mask, rel, d_mask.view(), &channel_settings(cfg), g_a);
    }
    Ok(loss)
}

/// Per-channel gate weights over all experts (`N × M`), zero where unselected.
pub fn dense_gates(gates: &[GateSelection]) -> Array2<f64> {
    let m = gates.first().map_or(0, |g| g.logits.len());
    let mut out = Array2::zeros((gates.len(), m));
    for (mut row, g) in out.rows_mut().into_iter().zip(gates) {
        row.assign(&Array1::from(g.dense()));
    }
    out
}

/// Total-variation distance between two dense gate matrices, averaged
/// over channels: `mean_n ½ Σ_m |a_nm − b_nm|`.
pub fn gate_tv(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    0.5 * (a - b).mapv(f64::abs).sum() / a.nrows().max(1) as f64
}

/// Mean [`gate_tv`] over every cross pair of the two groups.
pub fn mean_pairwise_gate_tv(group_a: &[Array2<f64>], group_b: &[Array2<f64>]) -> Option<f64> {
    if group_a.is_empty() || group_b.is_empty() {
        return None;
    }
    let total: f64 = group_a.iter().map(|a| group_b.iter().map(|b| gate_tv(a, b)).sum::<f64>()).sum();
    Some(total / (group_a.len() * group_b.len()) as f64)
}
