//! Trend/seasonal decomposition and the linear pattern extractors.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{shape_mismatch, DuetError, Result};
use crate::linalg::{vec_mat, vec_mat_add};

/// One `(trend, seasonal)` projection pair per extractor, each `T × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    pub trend: Vec<Array2<f64>>,
    pub seasonal: Vec<Array2<f64>>,
}

impl ExtractorParams {
    pub fn zeros(experts: usize, lookback: usize, hidden: usize) -> Self {
        Self {
            trend: vec![Array2::zeros((lookback, hidden)); experts],
            seasonal: vec![Array2::zeros((lookback, hidden)); experts],
        }
    }

    pub fn experts(&self) -> usize {
        self.trend.len()
    }

    pub fn hidden(&self) -> usize {
        self.trend.first().map_or(0, |w| w.ncols())
    }
}

/// A series split into a smooth part and the remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionPair {
    pub trend: Array1<f64>,
    pub seasonal: Array1<f64>,
}

/// Centered moving average with edge replication; `seasonal = x - trend`.
pub fn decompose_series(x: ArrayView1<f64>, kernel: usize) -> Result<DecompositionPair> {
    let t = x.len();
    let max = (2 * t).saturating_sub(1);
    if kernel == 0 || kernel.is_multiple_of(2) || kernel > max {
        return Err(DuetError::InvalidKernel { kernel, max });
    }
    let half = (kernel - 1) / 2;
    let at = |i: isize| -> f64 {
        let clamped = i.clamp(0, t as isize - 1) as usize;
        x[clamped]
    };
    let inv = 1.0 / kernel as f64;
    let trend: Array1<f64> = (0..t as isize)
        .map(|c| {
            let s: f64 = (c - half as isize..=c + half as isize).map(at).sum();
            s * inv
        })
        .collect();
    let seasonal = &x - &trend;
    Ok(DecompositionPair { trend, seasonal })
}

/// `trend · Wt[id] + seasonal · Ws[id]`.
pub fn extract_pattern(
    pair: &DecompositionPair,
    extractor_id: usize,
    params: &ExtractorParams,
) -> Result<Array1<f64>> {
    let experts = params.experts();
    if extractor_id >= experts {
        return Err(DuetError::UnknownExtractor {
            id: extractor_id,
            experts,
        });
    }
    let wt = &params.trend[extractor_id];
    if pair.trend.len() != wt.nrows() {
        return Err(shape_mismatch("extractor input", wt.nrows(), pair.trend.len()));
    }
    let mut out = vec_mat(pair.trend.view(), wt);
    vec_mat_add(&mut out, pair.seasonal.view(), &params.seasonal[extractor_id]);
    Ok(out)
}

/// Gate-weighted sum of the selected extractors' features.
pub fn aggregate_features(features: &[Array1<f64>], weights: &[f64]) -> Result<Array1<f64>> {
    if features.len() != weights.len() || features.is_empty() {
        return Err(shape_mismatch(
            "aggregate gates",
            weights.len(),
            features.len(),
        ));
    }
    let d = features[0].len();
    let mut out = Array1::zeros(d);
    for (f, &w) in features.iter().zip(weights) {
        if f.len() != d {
            return Err(shape_mismatch("aggregate feature width", d, f.len()));
        }
        out.scaled_add(w, f);
    }
    Ok(out)
}
