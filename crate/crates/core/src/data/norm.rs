use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{shape_mismatch, Result};

/// Per-channel statistics of one look-back window.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Array1<f64>,
    /// Population standard deviation, clamped below by the floor.
    pub std: Array1<f64>,
}

/// Standardizes each channel row of `x` by its own mean and population std.
pub fn instance_normalize(x: ArrayView2<f64>, std_floor: f64) -> (Array2<f64>, NormStats) {
    let t = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / t;
    let mut std = Array1::zeros(x.nrows());
    let mut out = x.to_owned();
    for (n, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let m = mean[n];
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t;
        let s = var.sqrt().max(std_floor);
        std[n] = s;
        row.mapv_inplace(|v| (v - m) / s);
    }
    (out, NormStats { mean, std })
}

/// Inverts [`instance_normalize`] on a forecast: `y·std + mean` per channel.
pub fn instance_denormalize(y_hat: ArrayView2<f64>, stats: &NormStats) -> Result<Array2<f64>> {
    if y_hat.nrows() != stats.mean.len() || stats.std.len() != stats.mean.len() {
        return Err(shape_mismatch(
            "denormalize channels",
            stats.mean.len(),
            y_hat.nrows(),
        ));
    }
    let mut out = y_hat.to_owned();
    for (n, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (stats.mean[n], stats.std[n]);
        row.mapv_inplace(|v| v * s + m);
    }
    Ok(out)
}

/// Dataset-level z-scoring fitted on the training segment.
///
/// Errors are reported on this scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &TimeSeriesDataset, range: Range<usize>) -> Self {
        let part = ds.values.slice(ndarray::s![.., range]);
        let l = part.ncols().max(1) as f64;
        let mut mean = Vec::with_capacity(part.nrows());
        let mut std = Vec::with_capacity(part.nrows());
        for row in part.axis_iter(Axis(0)) {
            let m = row.sum() / l;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / l;
            let s = var.sqrt();
            mean.push(m);
            // Constant channels pass through unscaled.
            std.push(if s > 0.0 { s } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn transform(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        if ds.channels() != self.mean.len() {
            return Err(shape_mismatch(
                "standardizer channels",
                self.mean.len(),
                ds.channels(),
            ));
        }
        let mut out = ds.clone();
        for (n, mut row) in out.values.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[n], self.std[n]);
            row.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }
}
