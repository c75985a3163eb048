//! A dual-clustering multivariate time-series forecaster.
//!
//! Each input window is instance-normalized, then passed through a temporal
//! module (a router picks `k` of `M` linear extractors per channel) and a
//! channel module (a learned metric over amplitude spectra yields a sparse
//! attention mask). A masked pre-norm transformer block fuses the two and a
//! linear head produces the forecast.

pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
mod linalg;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod temporal;
pub mod train;

pub use linalg::{sigmoid, softplus};

// Book chapters are compiled as doc-tests so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/temporal.md")]
    mod temporal {}
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

pub use config::{DuetConfig, MetricKind, VariantKind};
pub use error::{DuetError, Result};

/// Whether the forward pass samples (training) or runs deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}
