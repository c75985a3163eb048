//! Hyperparameters and ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DuetError, Result};

/// Which architecture variant to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Temporal experts, learned channel mask, masked attention.
    Full,
    /// Router removed; one shared extractor with gate fixed to 1.
    NoTcm,
    /// Mask forced to the identity (channel independent).
    NoCcm,
    /// Mask forced to all ones (channel dependent).
    FullAttention,
    /// Channel distances measured on the normalized time-domain window.
    TemporalInfo,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::Full,
        VariantKind::NoTcm,
        VariantKind::NoCcm,
        VariantKind::FullAttention,
        VariantKind::TemporalInfo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::NoTcm => "no_tcm",
            VariantKind::NoCcm => "no_ccm",
            VariantKind::FullAttention => "full_attention",
            VariantKind::TemporalInfo => "temporal_info",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = DuetError;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DuetError::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

/// How channel distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `(a-b)ᵀ AᵀA (a-b)` with learnable `A`.
    LearnedMahalanobis,
    Euclidean,
    Cosine,
    /// Distances unused; off-diagonal mask entries are fair coins.
    Random,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::LearnedMahalanobis,
        MetricKind::Euclidean,
        MetricKind::Cosine,
        MetricKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::LearnedMahalanobis => "learned_mahalanobis",
            MetricKind::Euclidean => "euclidean",
            MetricKind::Cosine => "cosine",
            MetricKind::Random => "random",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = DuetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" | "mahalanobis" => return Ok(MetricKind::LearnedMahalanobis),
            "euclid" => return Ok(MetricKind::Euclidean),
            _ => {}
        }
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DuetError::InvalidConfig(format!("unknown metric `{s}`")))
    }
}

/// Every knob of the model and of its training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuetConfig {
    /// Look-back window length `T`.
    pub lookback: usize,
    /// Forecast horizon `F`.
    pub horizon: usize,
    /// Channel count `N`.
    pub channels: usize,
    /// Size of the extractor cluster `M`.
    pub experts: usize,
    /// Extractors selected per channel `k`.
    pub top_k: usize,
    /// Temporal feature width `d`.
    pub hidden: usize,
    /// Router encoder width `d0`.
    pub router_hidden: usize,
    /// Feed-forward width inside the fusion block.
    pub ffn_hidden: usize,
    /// Moving-average kernel of the trend/seasonal split (odd).
    pub kernel: usize,
    /// Discount `γ` capping off-diagonal connection probabilities.
    pub gamma: f64,
    /// Gumbel-softmax temperature.
    pub temperature: f64,
    pub std_floor: f64,
    pub d_floor: f64,
    pub p_eps: f64,
    /// Eval-mode mask threshold on `P`.
    pub mask_threshold: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub variant: VariantKind,
    pub metric: MetricKind,
}

impl DuetConfig {
    /// Defaults for everything but the data-dependent shape.
    pub fn new(lookback: usize, horizon: usize, channels: usize) -> Self {
        let hidden = 128;
        Self {
            lookback,
            horizon,
            channels,
            experts: 4,
            top_k: 2,
            hidden,
            router_hidden: 64,
            ffn_hidden: 2 * hidden,
            kernel: 25,
            gamma: 0.9,
            temperature: 1.0,
            std_floor: 1e-5,
            d_floor: 1e-8,
            p_eps: 1e-6,
            mask_threshold: 0.5,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            variant: VariantKind::Full,
            metric: MetricKind::LearnedMahalanobis,
        }
    }

    /// Sets `hidden` and keeps the feed-forward width at twice it.
    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self.ffn_hidden = 2 * hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DuetError::InvalidConfig(msg));
        for (name, v) in [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("experts", self.experts),
            ("hidden", self.hidden),
            ("router_hidden", self.router_hidden),
            ("ffn_hidden", self.ffn_hidden),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return bad(format!(
                "topk {} must lie in 1..={} (experts)",
                self.top_k, self.experts
            ));
        }
        if self.kernel.is_multiple_of(2) || self.kernel > 2 * self.lookback - 1 {
            return bad(format!(
                "kernel {} must be odd and at most {}",
                self.kernel,
                2 * self.lookback - 1
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} must lie in (0, 1)", self.gamma));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.lookback < 2 && self.uses_frequency_domain() {
            return bad("lookback must be at least 2 for the frequency projection".into());
        }
        for (name, v) in [
            ("std_floor", self.std_floor),
            ("d_floor", self.d_floor),
            ("p_eps", self.p_eps),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be nonnegative", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Extractor count actually built (the no_tcm variant keeps one).
    pub fn effective_experts(&self) -> usize {
        match self.variant {
            VariantKind::NoTcm => 1,
            _ => self.experts,
        }
    }

    pub fn effective_top_k(&self) -> usize {
        match self.variant {
            VariantKind::NoTcm => 1,
            _ => self.top_k,
        }
    }

    pub fn has_router(&self) -> bool {
        self.variant != VariantKind::NoTcm
    }

    /// Whether the channel mask comes out of the clustering module.
    pub fn uses_channel_clustering(&self) -> bool {
        !matches!(self.variant, VariantKind::NoCcm | VariantKind::FullAttention)
    }

    pub fn uses_frequency_domain(&self) -> bool {
        self.uses_channel_clustering() && self.variant != VariantKind::TemporalInfo
    }

    /// Dimension of the space channel distances live in.
    pub fn metric_dim(&self) -> usize {
        if self.variant == VariantKind::TemporalInfo {
            self.lookback
        } else {
            self.lookback / 2
        }
    }

    pub fn has_learned_metric(&self) -> bool {
        self.uses_channel_clustering() && self.metric == MetricKind::LearnedMahalanobis
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        DuetConfig::new(96, 96, 7).validate().unwrap();
    }

    #[test]
    fn top_k_above_experts_is_rejected() {
        let mut c = DuetConfig::new(96, 96, 7);
        c.top_k = 5;
        assert!(matches!(c.validate(), Err(DuetError::InvalidConfig(_))));
    }

    #[test]
    fn even_kernel_is_rejected() {
        let mut c = DuetConfig::new(96, 96, 7);
        c.kernel = 24;
        assert!(c.validate().is_err());
    }

    #[test]
    fn names_round_trip() {
        for v in VariantKind::ALL {
            assert_eq!(v.name().parse::<VariantKind>().unwrap(), v);
        }
        for m in MetricKind::ALL {
            assert_eq!(m.name().parse::<MetricKind>().unwrap(), m);
        }
        assert!("bogus".parse::<VariantKind>().is_err());
    }

    #[test]
    fn no_tcm_collapses_the_cluster() {
        let mut c = DuetConfig::new(48, 24, 4);
        c.variant = VariantKind::NoTcm;
        assert_eq!((c.effective_experts(), c.effective_top_k()), (1, 1));
        assert!(!c.has_router());
    }
}
