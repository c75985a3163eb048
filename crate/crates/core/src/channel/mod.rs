//! Channel clustering: amplitude spectra, a learnable channel metric,
//! probability normalization and Bernoulli mask sampling.

mod mask;
mod metric;
mod spectrum;

pub use mask::{build_probability_matrix, sample_mask, ChannelMask, ChannelRelation, MaskSettings};
pub use metric::{channel_distance, MetricParams};
pub use spectrum::{frequency_amplitude, frequency_bins};

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::config::MetricKind;
use crate::error::Result;
use crate::linalg::add_outer;
use crate::Mode;
use mask::backprop_probability;
use metric::projected_delta;

/// Everything the channel module needs besides the metric weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSettings {
    pub gamma: f64,
    pub d_floor: f64,
    pub mask: MaskSettings,
    /// Measure distances between amplitude spectra (otherwise between the
    /// normalized windows themselves).
    pub frequency_domain: bool,
}

struct PairTrace {
    i: usize,
    j: usize,
    projected: Array1<f64>,
    delta: Array1<f64>,
}

pub(crate) struct CcmTrace {
    pairs: Vec<PairTrace>,
}

/// Channel features: amplitude spectra or the raw rows.
pub fn channel_features(x_norm: ArrayView2<f64>, frequency_domain: bool) -> Result<Array2<f64>> {
    if !frequency_domain {
        return Ok(x_norm.to_owned());
    }
    let (n, t) = x_norm.dim();
    let mut out = Array2::zeros((n, frequency_bins(t)));
    for (row, mut o) in x_norm.rows().into_iter().zip(out.rows_mut()) {
        o.assign(&frequency_amplitude(row)?);
    }
    Ok(out)
}

/// Mask and relation matrices for one normalized window.
pub fn ccm_forward<R: Rng + ?Sized>(
    x_norm: ArrayView2<f64>,
    params: &MetricParams,
    settings: &ChannelSettings,
    mode: Mode,
    rng: &mut R,
) -> Result<(ChannelMask, ChannelRelation)> {
    let (mask, rel, _) = ccm_forward_traced(x_norm, params, settings, mode, rng)?;
    Ok((mask, rel))
}

pub(crate) fn ccm_forward_traced<R: Rng + ?Sized>(
    x_norm: ArrayView2<f64>,
    params: &MetricParams,
    settings: &ChannelSettings,
    mode: Mode,
    rng: &mut R,
) -> Result<(ChannelMask, ChannelRelation, CcmTrace)> {
    let n = x_norm.nrows();
    let mut pairs = Vec::new();
    let rel = if params.kind == MetricKind::Random {
        let p = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.5 });
        ChannelRelation {
            d: Array2::zeros((n, n)),
            c: Array2::zeros((n, n)),
            p,
            row_max: vec![None; n],
        }
    } else {
        let feats = channel_features(x_norm, settings.frequency_domain)?;
        let mut d = Array2::zeros((n, n));
        for i in 0..n {
            for j in i + 1..n {
                let dist = match (&params.a, params.kind) {
                    (Some(a), MetricKind::LearnedMahalanobis) => {
                        if a.ncols() != feats.ncols() {
                            return Err(crate::error::shape_mismatch(
                                "metric matrix",
                                feats.ncols(),
                                a.ncols(),
                            ));
                        }
                        let (u, delta) = projected_delta(a, feats.row(i), feats.row(j));
                        let v = u.dot(&u);
                        pairs.push(PairTrace {
                            i,
                            j,
                            projected: u,
                            delta,
                        });
                        v
                    }
                    _ => channel_distance(feats.row(i), feats.row(j), params)?,
                };
                d[[i, j]] = dist;
                d[[j, i]] = dist;
            }
        }
        build_probability_matrix(d.view(), settings.gamma, settings.d_floor)?
    };
    let mask_settings = MaskSettings {
        random: params.kind == MetricKind::Random,
        ..settings.mask
    };
    let mask = sample_mask(&rel, &mask_settings, mode, rng);
    Ok((mask, rel, CcmTrace { pairs }))
}

/// Straight-through backward from `∂L/∂M` to the metric factor `A`.
pub(crate) fn ccm_backward(
    trace: &CcmTrace,
    mask: &ChannelMask,
    rel: &ChannelRelation,
    d_mask: ArrayView2<f64>,
    settings: &ChannelSettings,
    g_a: &mut Array2<f64>,
) {
    let Some(dsdp) = &mask.dsurrogate_dp else {
        return;
    };
    if trace.pairs.is_empty() {
        return;
    }
    let d_p = &d_mask * dsdp;
    let d_c = backprop_probability(rel, d_p.view(), settings.gamma);
    let d_dist = |i: usize, j: usize| {
        let dist = rel.d[[i, j]];
        if dist > settings.d_floor {
            -d_c[[i, j]] / (dist * dist)
        } else {
            0.0
        }
    };
    for pair in &trace.pairs {
        let total = d_dist(pair.i, pair.j) + d_dist(pair.j, pair.i);
        if total != 0.0 {
            add_outer(g_a, pair.projected.view(), pair.delta.view(), 2.0 * total);
        }
    }
}
