//! Losses, metrics, Adam and the training loop.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DuetConfig;
use crate::data::WindowPair;
use crate::error::{shape_mismatch, DuetError, Result};
use crate::model::{accumulate_gradient, duet_forward, ModelParams};

const GRAD_CHUNK: usize = 16;
use crate::rng::{substream, Stream};
use crate::Mode;

/// Mean absolute error over every entry.
pub fn l1_loss(y_hat: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if y_hat.dim() != y.dim() {
        return Err(shape_mismatch("l1 loss", y.dim(), y_hat.dim()));
    }
    Ok((&y_hat - &y).mapv(f64::abs).mean().unwrap_or(0.0))
}

/// Error at one forecast step, averaged over windows and channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
    pub per_horizon: Vec<HorizonMetrics>,
}

/// MSE and MAE over the flattened set of windows, channels and steps.
pub fn compute_metrics(predictions: &[Array2<f64>], targets: &[Array2<f64>]) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(DuetError::EmptySet("no windows to score".into()));
    }
    if predictions.len() != targets.len() {
        return Err(shape_mismatch("window count", targets.len(), predictions.len()));
    }
    let horizon = targets[0].ncols();
    let mut sq = vec![0.0; horizon];
    let mut ab = vec![0.0; horizon];
    let mut rows = 0usize;
    for (p, y) in predictions.iter().zip(targets) {
        if p.dim() != y.dim() || y.ncols() != horizon {
            return Err(shape_mismatch("prediction", y.dim(), p.dim()));
        }
        for (pr, yr) in p.rows().into_iter().zip(y.rows()) {
            for (f, (a, b)) in pr.iter().zip(yr).enumerate() {
                let e = a - b;
                sq[f] += e * e;
                ab[f] += e.abs();
            }
        }
        rows += y.nrows();
    }
    let per_horizon = sq
        .iter()
        .zip(&ab)
        .map(|(s, a)| HorizonMetrics {
            mse: s / rows as f64,
            mae: a / rows as f64,
        })
        .collect();
    let total = (rows * horizon) as f64;
    Ok(Metrics {
        mse: sq.iter().sum::<f64>() / total,
        mae: ab.iter().sum::<f64>() / total,
        n_windows: predictions.len(),
        per_horizon,
    })
}

/// Adam moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` by `grad`.
    ///
    /// Parameters are rounded to `f32` afterwards, so a zero gradient (or a
    /// zero learning rate) leaves them bit-identical.
    pub fn update(&mut self, params: &mut ModelParams, grad: &ModelParams, cfg: &DuetConfig) {
        self.step += 1;
        let g = grad.flatten();
        let mut theta = params.flatten();
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
        params.assign_flat(&theta);
        params.round_to_f32();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

/// Everything needed to resume or report a run.
///
/// Randomness is drawn from substreams keyed by the seed, the epoch (for
/// shuffling) and the step (for gate noise and masks), so the counters here
/// are the whole RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: DuetConfig,
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_val_mse: f64,
    pub epochs_since_best: usize,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(config: &DuetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, Stream::Init, 0, 0);
        let params = ModelParams::init(config, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            adam: AdamState::new(params.num_scalars()),
            best_params: params.clone(),
            params,
            epoch: 0,
            best_val_mse: f64::INFINITY,
            epochs_since_best: 0,
            history: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Mean loss and averaged gradient over `batch`, then one Adam update.
    pub fn train_step(&mut self, batch: &[&WindowPair]) -> Result<f64> {
        if batch.is_empty() {
            return Err(DuetError::EmptySet("empty batch".into()));
        }
        let step = self.adam.step;
        let cfg = &self.config;
        let params = &self.params;
        let scale = 1.0 / batch.len() as f64;
        // Fixed-size chunks keep the summation order independent of the
        // thread count.
        let partials: Vec<(f64, ModelParams)> = batch
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut g = params.zeros_like();
                let mut loss = 0.0;
                for (j, w) in chunk.iter().enumerate() {
                    let i = (c * GRAD_CHUNK + j) as u64;
                    let mut rng = substream(cfg.seed, Stream::Forward, step, i);
                    let l = accumulate_gradient(w.x.view(), w.y.view(), params, cfg, Mode::Train, &mut rng, scale, &mut g)?;
                    loss += l * scale;
                }
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let mut parts = partials.into_iter();
        let (mut loss, mut grad) = parts.next().expect("batch is nonempty");
        for (l, g) in parts {
            loss += l;
            grad.add_scaled(&g, 1.0);
        }
        if !loss.is_finite() || !grad.all_finite() {
            return Err(DuetError::Divergence { step, loss });
        }
        self.adam.update(&mut self.params, &grad, cfg);
        if !self.params.all_finite() {
            return Err(DuetError::Divergence { step, loss });
        }
        Ok(loss)
    }

    /// One shuffled pass over `train`; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &[WindowPair]) -> Result<f64> {
        if train.is_empty() {
            return Err(DuetError::EmptySet("no training windows".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(self.config.seed, Stream::Shuffle, self.epoch as u64, 0));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&WindowPair> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.train_step(&batch)?;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }
}

/// Adam on the L1 loss with early stopping on validation MSE.
///
/// The returned state's `best_params` are the weights from the epoch with
/// the lowest validation MSE.
pub fn fit(config: &DuetConfig, train: &[WindowPair], val: &[WindowPair]) -> Result<TrainState> {
    fit_with(config, train, val, |_| {})
}

/// As [`fit`], calling `on_epoch` after each epoch.
pub fn fit_with(
    config: &DuetConfig,
    train: &[WindowPair],
    val: &[WindowPair],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    if train.is_empty() || val.is_empty() {
        return Err(DuetError::EmptySet(format!(
            "fit needs windows (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    let mut state = TrainState::new(config)?;
    while state.epoch < config.max_epochs {
        let train_loss = state.train_epoch(train)?;
        let val_mse = evaluate(&state.params, config, val)?.mse;
        let log = EpochLog {
            epoch: state.epoch,
            train_loss,
            val_mse,
        };
        on_epoch(&log);
        state.history.push(log);
        if val_mse < state.best_val_mse {
            state.best_val_mse = val_mse;
            state.best_params = state.params.clone();
            state.epochs_since_best = 0;
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best >= config.patience {
                break;
            }
        }
    }
    Ok(state)
}

/// Eval-mode forecasts for every window, in order.
pub fn predict_windows(params: &ModelParams, cfg: &DuetConfig, windows: &[WindowPair]) -> Result<Vec<Array2<f64>>> {
    windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = substream(cfg.seed, Stream::Eval, 0, i as u64);
            Ok(duet_forward(w.x.view(), params, cfg, Mode::Eval, &mut rng)?.prediction)
        })
        .collect()
}

/// Checks that `windows` have the shapes `cfg` was trained for.
pub fn check_windows(cfg: &DuetConfig, windows: &[WindowPair]) -> Result<()> {
    for w in windows {
        if w.x.dim() != (cfg.channels, cfg.lookback) || w.y.dim() != (cfg.channels, cfg.horizon) {
            return Err(DuetError::ConfigMismatch(format!(
                "model expects {} channels, lookback {}, horizon {}; window has x {:?}, y {:?}",
                cfg.channels,
                cfg.lookback,
                cfg.horizon,
                w.x.dim(),
                w.y.dim()
            )));
        }
    }
    Ok(())
}

/// Eval-mode metrics (zero gate noise, thresholded mask).
pub fn evaluate(params: &ModelParams, cfg: &DuetConfig, windows: &[WindowPair]) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(DuetError::EmptySet("no evaluation windows".into()));
    }
    check_windows(cfg, windows)?;
    let preds = predict_windows(params, cfg, windows)?;
    let targets: Vec<Array2<f64>> = windows.iter().map(|w| w.y.clone()).collect();
    compute_metrics(&preds, &targets)
}
