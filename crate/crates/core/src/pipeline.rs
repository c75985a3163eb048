//! Dataset to windows to trained model to report.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::DuetConfig;
use crate::data::{make_windows, split_dataset, SplitRanges, SplitSpec, Standardizer, TimeSeriesDataset, WindowPair};
use crate::error::{DuetError, Result};
use crate::train::{evaluate, fit_with, EpochLog, Metrics, TrainState};

/// Standardized windows for each split part.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub scaler: Standardizer,
    pub ranges: SplitRanges,
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
}

impl PreparedData {
    pub fn part(&self, name: &str) -> Option<&[WindowPair]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Splits `ds`, fits the scaler on the training part and cuts windows.
pub fn prepare(ds: &TimeSeriesDataset, split: SplitSpec, lookback: usize, horizon: usize) -> Result<PreparedData> {
    let ranges = split_dataset(ds.len(), split, lookback, horizon)?;
    let scaler = Standardizer::fit(ds, ranges.train.clone());
    prepare_with(ds, ranges, scaler, lookback, horizon)
}

/// As [`prepare`] with a scaler from an earlier run.
pub fn prepare_with(
    ds: &TimeSeriesDataset,
    ranges: SplitRanges,
    scaler: Standardizer,
    lookback: usize,
    horizon: usize,
) -> Result<PreparedData> {
    if scaler.mean.len() != ds.channels() {
        return Err(DuetError::ConfigMismatch(format!(
            "scaler covers {} channels, dataset has {}",
            scaler.mean.len(),
            ds.channels()
        )));
    }
    let scaled = scaler.transform(ds)?;
    let cut = |r: std::ops::Range<usize>| make_windows(&scaled, r, lookback, horizon);
    Ok(PreparedData {
        train: cut(ranges.train.clone())?,
        val: cut(ranges.val.clone())?,
        test: cut(ranges.test.clone())?,
        ranges,
        scaler,
    })
}

/// Flat summary of one trained and evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    pub variant: String,
    pub metric_kind: String,
    #[serde(rename = "T")]
    pub lookback: usize,
    #[serde(rename = "F")]
    pub horizon: usize,
    #[serde(rename = "M")]
    pub experts: usize,
    pub k: usize,
    pub seed: u64,
    pub split: String,
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
    pub normalized_scale: bool,
    pub wall_seconds: f64,
    pub per_horizon_mse: Vec<f64>,
    pub per_horizon_mae: Vec<f64>,
}

impl Report {
    pub fn new(dataset: &str, cfg: &DuetConfig, split: &str, metrics: &Metrics, wall_seconds: f64) -> Self {
        Self {
            dataset: dataset.to_owned(),
            variant: cfg.variant.name().to_owned(),
            metric_kind: cfg.metric.name().to_owned(),
            lookback: cfg.lookback,
            horizon: cfg.horizon,
            experts: cfg.effective_experts(),
            k: cfg.effective_top_k(),
            seed: cfg.seed,
            split: split.to_owned(),
            mse: metrics.mse,
            mae: metrics.mae,
            n_windows: metrics.n_windows,
            normalized_scale: true,
            wall_seconds,
            per_horizon_mse: metrics.per_horizon.iter().map(|h| h.mse).collect(),
            per_horizon_mae: metrics.per_horizon.iter().map(|h| h.mae).collect(),
        }
    }

    /// Pretty JSON with `wall_seconds` zeroed; equal runs give equal bytes.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.wall_seconds = 0.0;
        r.to_json()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields serialize")
    }
}

/// Outcome of [`train_and_evaluate`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub scaler: Standardizer,
    pub test: Metrics,
    pub report: Report,
}

/// Fits on the train part (early stopping on val) and scores the best
/// weights on the test part.
pub fn train_and_evaluate(
    dataset_name: &str,
    data: &PreparedData,
    cfg: &DuetConfig,
    split: SplitSpec,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<RunOutcome> {
    let start = Instant::now();
    let state = fit_with(cfg, &data.train, &data.val, on_epoch)?;
    let test = evaluate(&state.best_params, cfg, &data.test)?;
    let report = Report::new(dataset_name, cfg, &split.to_string(), &test, start.elapsed().as_secs_f64());
    Ok(RunOutcome {
        state,
        scaler: data.scaler.clone(),
        test,
        report,
    })
}
