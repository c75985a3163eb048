//! Synthetic datasets with known structure.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{DuetError, Result};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Alternating trend-dominant and seasonal-dominant segments.
    TwoRegime,
    /// A pair of channels with a set lag-0 correlation, plus noise channels.
    CorrelatedPair,
    /// Noiseless sums of sinusoids.
    SinusoidMix,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::TwoRegime => "two_regime",
            SyntheticKind::CorrelatedPair => "correlated_pair",
            SyntheticKind::SinusoidMix => "sinusoid_mix",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = DuetError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_regime" => Ok(SyntheticKind::TwoRegime),
            "correlated_pair" => Ok(SyntheticKind::CorrelatedPair),
            "sinusoid_mix" => Ok(SyntheticKind::SinusoidMix),
            other => Err(DuetError::InvalidSpec(format!(
                "unknown synthetic kind {other:?} (expected two_regime, correlated_pair or sinusoid_mix)"
            ))),
        }
    }
}

/// Regime A's total per-step variance (signal plus noise, each half).
pub const REGIME_A_VARIANCE: f64 = 1.0;
/// Regime B's variance over regime A's.
pub const REGIME_VARIANCE_RATIO: f64 = 4.0;
pub const SAWTOOTH_PERIOD: usize = 48;
pub const SINE_PERIOD: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub length: usize,
    pub channels: usize,
    pub seed: u64,
    /// Steps per regime segment (two_regime).
    pub segment: usize,
    /// Noise multiplier; 0 gives the bare signals.
    pub noise: f64,
    /// Target lag-0 correlation of the pair (correlated_pair).
    pub correlation: f64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, length: usize, channels: usize, seed: u64) -> Self {
        Self {
            kind,
            length,
            channels,
            seed,
            segment: 240,
            noise: 1.0,
            correlation: 0.95,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DuetError::InvalidSpec(m));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.length < 64 {
            return bad(format!("length {} is below the minimum of 64", self.length));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be a finite nonnegative number", self.noise));
        }
        match self.kind {
            SyntheticKind::TwoRegime if self.segment < 2 || self.length < 2 * self.segment => {
                bad(format!("length {} holds fewer than two segments of {}", self.length, self.segment))
            }
            SyntheticKind::CorrelatedPair if self.channels < 2 => {
                bad("correlated_pair needs at least 2 channels".into())
            }
            SyntheticKind::CorrelatedPair if !(self.correlation > 0.0 && self.correlation < 1.0) => {
                bad(format!("correlation {} must lie in (0, 1)", self.correlation))
            }
            _ => Ok(()),
        }
    }
}

/// A generated dataset, with per-step regime labels for two_regime.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub dataset: TimeSeriesDataset,
    /// 0 for regime A, 1 for regime B, one per time step.
    pub regimes: Option<Vec<u8>>,
}

impl SyntheticSeries {
    /// The regime of a window whose input and target lie in one segment.
    pub fn window_regime(&self, origin: usize, lookback: usize, horizon: usize) -> Option<u8> {
        let labels = self.regimes.as_ref()?;
        let span = labels.get(origin.checked_sub(lookback)?..origin + horizon)?;
        let first = *span.first()?;
        span.iter().all(|&r| r == first).then_some(first)
    }
}

/// Shorthand for [`generate`] with default segment, noise and correlation.
pub fn make_synthetic(kind: SyntheticKind, length: usize, channels: usize, seed: u64) -> Result<TimeSeriesDataset> {
    Ok(generate(&SyntheticSpec::new(kind, length, channels, seed))?.dataset)
}

fn ar1<R: Rng>(rng: &mut R, len: usize, phi: f64, variance: f64) -> Vec<f64> {
    let innov = (variance * (1.0 - phi * phi)).sqrt();
    let mut e: f64 = variance.sqrt() * rng.sample::<f64, _>(StandardNormal);
    (0..len)
        .map(|i| {
            if i > 0 {
                e = phi * e + innov * rng.sample::<f64, _>(StandardNormal);
            }
            e
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSeries> {
    spec.validate()?;
    let (n, len) = (spec.channels, spec.length);
    let mut values = Array2::zeros((n, len));
    let mut regimes = None;
    match spec.kind {
        SyntheticKind::TwoRegime => {
            let labels: Vec<u8> = (0..len).map(|t| ((t / spec.segment) % 2) as u8).collect();
            // Half of each regime's variance is signal, half noise.
            let var_a = REGIME_A_VARIANCE / 2.0;
            let var_b = REGIME_A_VARIANCE * REGIME_VARIANCE_RATIO / 2.0;
            let s = SAWTOOTH_PERIOD as f64;
            let slope = (12.0 * var_a / (s * s - 1.0)).sqrt();
            let amp = (2.0 * var_b).sqrt();
            for c in 0..n {
                let mut rng = substream(spec.seed, Stream::Synthetic, 0, c as u64);
                let shift = 7 * c;
                let mut start = 0;
                while start < len {
                    let end = (start + spec.segment).min(len);
                    let regime = labels[start];
                    let (phi, var) = if regime == 0 { (0.8, var_a) } else { (-0.8, var_b) };
                    let noise = ar1(&mut rng, end - start, phi, var);
                    for t in start..end {
                        let signal = if regime == 0 {
                            let pos = ((t + shift) % SAWTOOTH_PERIOD) as f64;
                            1.0 + slope * (pos - (s - 1.0) / 2.0)
                        } else {
                            -1.0 + amp * (2.0 * PI * (t + shift) as f64 / SINE_PERIOD as f64).sin()
                        };
                        values[[c, t]] = signal + spec.noise * noise[t - start];
                    }
                    start = end;
                }
            }
            regimes = Some(labels);
        }
        SyntheticKind::CorrelatedPair => {
            let mut rng = substream(spec.seed, Stream::Synthetic, 1, 0);
            let shared = ar1(&mut rng, len, 0.9, 1.0);
            let c = ((1.0 - spec.correlation) / spec.correlation).sqrt();
            for ch in 0..n {
                let mut rng = substream(spec.seed, Stream::Synthetic, 1, 1 + ch as u64);
                let own = ar1(&mut rng, len, 0.5, 1.0);
                for t in 0..len {
                    values[[ch, t]] = if ch < 2 {
                        shared[t] + c * own[t]
                    } else {
                        own[t]
                    };
                }
            }
        }
        SyntheticKind::SinusoidMix => {
            let mut rng = substream(spec.seed, Stream::Synthetic, 2, 0);
            for ch in 0..n {
                let parts: Vec<(f64, f64, f64)> = [12.0, 24.0, 48.0]
                    .iter()
                    .map(|&p| (rng.random_range(0.3..1.5), p, rng.random_range(0.0..2.0 * PI)))
                    .collect();
                for t in 0..len {
                    values[[ch, t]] = parts
                        .iter()
                        .map(|(a, p, ph)| a * (2.0 * PI * t as f64 / p + ph).sin())
                        .sum();
                }
            }
        }
    }
    let names = (0..n).map(|c| format!("ch{c}")).collect();
    let mut dataset = TimeSeriesDataset::new(values, names)?;
    dataset.source_path = format!("synthetic:{}", spec.kind);
    Ok(SyntheticSeries { dataset, regimes })
}
