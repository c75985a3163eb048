//! Brute-force reference implementations and statistical checks.
//!
//! Nothing here calls into the numeric kernels it is meant to check: every
//! oracle is written with scalar loops from the defining formulas.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_mask, ChannelRelation, MaskSettings};
use crate::error::{DuetError, Result};
use crate::rng::{substream, Stream};
use crate::temporal::{sample_gate_logits, ExtractorParams, RouterParams, TemporalFeature};
use crate::Mode;

/// Outcome of one oracle run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub n_cases: usize,
    pub passed: bool,
    /// The acceptance rule the errors were judged against.
    pub tolerance: String,
    pub details: String,
}

impl OracleReport {
    /// One JSON object on a single line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report fields serialize")
    }
}

/// `|Σ_t x_t e^{-2πi·bt/T}|` for `b = 1..=T/2`, by direct summation.
pub fn dft_oracle(x: &[f64]) -> Vec<f64> {
    let t = x.len();
    (1..=t / 2)
        .map(|b| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                // Reduce b·n mod T first so the angle stays small.
                let ang = -2.0 * PI * ((b * n) % t) as f64 / t as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

/// Central-difference gradient estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifference {
    pub gradient: Vec<f64>,
    /// Coordinates where the one-sided slopes disagree, i.e. the loss has
    /// a kink within `±h` (reported, not an error).
    pub kinks: Vec<usize>,
}

/// `(f(θ+h e_i) − f(θ−h e_i)) / 2h` for every coordinate.
///
/// `f` is evaluated twice at `theta` first; differing values mean the loss
/// is not deterministic and no estimate is meaningful.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    h: f64,
) -> Result<FiniteDifference> {
    let first = f(theta);
    let second = f(theta);
    if first.to_bits() != second.to_bits() {
        return Err(DuetError::NonDeterministicLoss { first, second });
    }
    let mut x = theta.to_vec();
    let mut gradient = Vec::with_capacity(theta.len());
    let mut kinks = Vec::new();
    for i in 0..theta.len() {
        x[i] = theta[i] + h;
        let up = f(&x);
        x[i] = theta[i] - h;
        let down = f(&x);
        x[i] = theta[i];
        let right = (up - first) / h;
        let left = (first - down) / h;
        // Smooth losses give one-sided slopes within O(h) of each other.
        if (right - left).abs() > 1e-3 * (1.0 + right.abs().max(left.abs())) {
            kinks.push(i);
        }
        gradient.push((up - down) / (2.0 * h));
    }
    Ok(FiniteDifference { gradient, kinks })
}

fn inverse_softplus(s: f64) -> f64 {
    if s == 0.0 {
        f64::NEG_INFINITY
    } else if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

/// Monte-Carlo check that the sampled gate logits `H = W^H(μ + ε⊙σ)`,
/// `ε ~ N(0, I)`, follow `N(W^H μ, diag(Σ_j (W^H_ij σ_j)²))` per component.
///
/// `sigma` is the noise scale itself (the router's softplus output).
/// Means must land within 3 standard errors and variances within 5%
/// relative; a zero expected variance must be matched exactly.
pub fn gating_equivalence_check(
    mu: ArrayView1<f64>,
    sigma: ArrayView1<f64>,
    wh: ArrayView2<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<OracleReport> {
    let m = mu.len();
    if sigma.len() != m || wh.dim() != (m, m) {
        return Err(crate::error::shape_mismatch("gating check inputs", (m, m), wh.dim()));
    }
    if n_samples < 2 {
        return Err(DuetError::InvalidConfig("gating check needs at least 2 samples".into()));
    }
    let router = RouterParams {
        wh: wh.to_owned(),
        ..RouterParams::zeros(1, 1, m)
    };
    let sigma_raw = sigma.mapv(inverse_softplus);
    let mut rng = substream(seed, Stream::Oracle, 0, 0);
    let mut sum = vec![0.0; m];
    let mut sumsq = vec![0.0; m];
    let mut eps = ndarray::Array1::zeros(m);
    // Welford-free two-pass would need storage; shift by the expected mean
    // instead so the one-pass sums stay well conditioned.
    let mean: Vec<f64> = (0..m).map(|i| (0..m).map(|j| wh[[i, j]] * mu[j]).sum()).collect();
    let var: Vec<f64> = (0..m)
        .map(|i| (0..m).map(|j| (wh[[i, j]] * sigma[j]).powi(2)).sum())
        .collect();
    for _ in 0..n_samples {
        eps.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let h = sample_gate_logits(mu, sigma_raw.view(), eps.view(), &router);
        for i in 0..m {
            let d = h[i] - mean[i];
            sum[i] += d;
            sumsq[i] += d * d;
        }
    }
    let n = n_samples as f64;
    let mut passed = true;
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    let mut worst = String::new();
    for i in 0..m {
        let off = sum[i] / n;
        let emp_var = (sumsq[i] - n * off * off) / (n - 1.0);
        let se = (var[i] / n).sqrt();
        let mean_ok = if var[i] == 0.0 { off == 0.0 } else { off.abs() <= 3.0 * se };
        let rel = if var[i] == 0.0 {
            if emp_var == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            (emp_var / var[i] - 1.0).abs()
        };
        let var_ok = rel <= 0.05;
        passed &= mean_ok && var_ok;
        if off.abs() > max_abs {
            max_abs = off.abs();
        }
        if rel > max_rel {
            max_rel = rel;
            worst = format!("component {i}: mean offset {off:.3e} (se {se:.3e}), variance {emp_var:.4e} vs {:.4e}", var[i]);
        }
    }
    Ok(OracleReport {
        name: "gating_equivalence".into(),
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        n_cases: m,
        passed,
        tolerance: "mean within 3 standard errors; variance within 5% relative".into(),
        details: format!("{n_samples} samples; worst {worst}"),
    })
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn softplus_ref(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// The temporal module recomputed densely: logits of unselected experts
/// are set to `-∞`, the softmax runs over all `M` and every extractor's
/// feature enters the sum.
///
/// `noise` holds the `N × M` standard-normal draws (zeros for eval mode).
/// With `router = None` a single extractor is applied with weight 1.
pub fn dense_mixture_oracle(
    x_norm: ArrayView2<f64>,
    router: Option<&RouterParams>,
    extractors: &ExtractorParams,
    k: usize,
    kernel: usize,
    noise: Option<ArrayView2<f64>>,
) -> TemporalFeature {
    let (n, t) = x_norm.dim();
    let m = extractors.trend.len();
    let d = extractors.trend[0].ncols();
    let half = kernel / 2;
    let mut out = Array2::zeros((n, d));
    for c in 0..n {
        let x: Vec<f64> = (0..t).map(|i| x_norm[[c, i]]).collect();
        let weights: Vec<f64> = match router {
            None => vec![1.0],
            Some(r) => {
                let d0 = r.w0_mu.ncols();
                let enc = |w0: &Array2<f64>, w1: &Array2<f64>| -> Vec<f64> {
                    let hidden: Vec<f64> = (0..d0)
                        .map(|h| relu((0..t).map(|i| x[i] * w0[[i, h]]).sum()))
                        .collect();
                    (0..m).map(|j| (0..d0).map(|h| hidden[h] * w1[[h, j]]).sum()).collect()
                };
                let mu = enc(&r.w0_mu, &r.w1_mu);
                let sr = enc(&r.w0_sigma, &r.w1_sigma);
                let z: Vec<f64> = (0..m)
                    .map(|j| mu[j] + noise.map_or(0.0, |e| e[[c, j]]) * softplus_ref(sr[j]))
                    .collect();
                let logits: Vec<f64> = (0..m).map(|i| (0..m).map(|j| r.wh[[i, j]] * z[j]).sum()).collect();
                // Keep the k largest, ties to the lower index.
                let mut kept = vec![false; m];
                for _ in 0..k {
                    let mut best: Option<usize> = None;
                    for j in 0..m {
                        if !kept[j] && best.is_none_or(|b| logits[j] > logits[b]) {
                            best = Some(j);
                        }
                    }
                    kept[best.expect("k <= M")] = true;
                }
                let masked: Vec<f64> = (0..m)
                    .map(|j| if kept[j] { logits[j] } else { f64::NEG_INFINITY })
                    .collect();
                let top = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = masked.iter().map(|v| (v - top).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            }
        };
        // Moving average with replicate padding.
        let trend: Vec<f64> = (0..t)
            .map(|i| {
                let mut acc = 0.0;
                for o in 0..kernel {
                    let j = (i + o).saturating_sub(half).min(t - 1);
                    let j = if i + o < half { 0 } else { j };
                    acc += x[j];
                }
                acc / kernel as f64
            })
            .collect();
        let seasonal: Vec<f64> = (0..t).map(|i| x[i] - trend[i]).collect();
        for (j, &w) in weights.iter().enumerate() {
            for h in 0..d {
                let mut f = 0.0;
                for i in 0..t {
                    f += trend[i] * extractors.trend[j][[i, h]] + seasonal[i] * extractors.seasonal[j][[i, h]];
                }
                out[[c, h]] += w * f;
            }
        }
    }
    TemporalFeature { values: out }
}

/// Monte-Carlo check of train-mode mask sampling: the empirical frequency
/// of `M_ij = 1` must lie within `tolerance` of `P_ij`, and every sampled
/// diagonal must be 1.
pub fn mask_frequency_check(
    relation: &ChannelRelation,
    settings: &MaskSettings,
    n_samples: usize,
    tolerance: f64,
    seed: u64,
) -> OracleReport {
    let n = relation.p.nrows();
    let mut counts = Array2::<f64>::zeros((n, n));
    let mut diagonal_ok = true;
    let mut rng = substream(seed, Stream::Oracle, 1, 0);
    for _ in 0..n_samples {
        let m = sample_mask(relation, settings, Mode::Train, &mut rng);
        for i in 0..n {
            diagonal_ok &= m.hard[[i, i]] == 1.0;
            for j in 0..n {
                counts[[i, j]] += m.hard[[i, j]];
            }
        }
    }
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = relation.p[[i, j]];
            let err = (counts[[i, j]] / n_samples as f64 - p).abs();
            max_abs = max_abs.max(err);
            if p > 0.0 {
                max_rel = max_rel.max(err / p);
            }
        }
    }
    OracleReport {
        name: "mask_frequency".into(),
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        n_cases: n * n,
        passed: diagonal_ok && max_abs <= tolerance,
        tolerance: format!("|freq - P| <= {tolerance}; diagonal always 1"),
        details: format!("{n_samples} samples; diagonal {}", if diagonal_ok { "ok" } else { "violated" }),
    }
}
