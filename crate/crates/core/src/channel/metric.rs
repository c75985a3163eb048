use ndarray::{Array1, Array2, ArrayView1};

use crate::config::MetricKind;
use crate::error::{shape_mismatch, Result};

/// The channel metric. `a` is present only for the learned kind, where the
/// metric matrix is `Q = AᵀA` and therefore positive semi-definite.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricParams {
    pub a: Option<Array2<f64>>,
    pub kind: MetricKind,
}

impl MetricParams {
    /// Learned metric starting at the identity (plain squared Euclidean).
    pub fn identity(dim: usize) -> Self {
        Self {
            a: Some(Array2::eye(dim)),
            kind: MetricKind::LearnedMahalanobis,
        }
    }

    pub fn fixed(kind: MetricKind) -> Self {
        Self { a: None, kind }
    }

    /// `Q = AᵀA`, when the metric is learned.
    pub fn q(&self) -> Option<Array2<f64>> {
        self.a.as_ref().map(|a| a.t().dot(a))
    }
}

/// Distance between two amplitude (or time-domain) vectors.
///
/// The random kind never consults distances and returns 0.
pub fn channel_distance(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    params: &MetricParams,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_mismatch("channel distance", a.len(), b.len()));
    }
    Ok(match params.kind {
        MetricKind::LearnedMahalanobis => {
            let delta = &a - &b;
            match &params.a {
                Some(m) => {
                    if m.ncols() != delta.len() {
                        return Err(shape_mismatch("metric matrix", delta.len(), m.ncols()));
                    }
                    let u = m.dot(&delta);
                    u.dot(&u)
                }
                None => delta.dot(&delta),
            }
        }
        MetricKind::Euclidean => {
            let delta = &a - &b;
            delta.dot(&delta)
        }
        MetricKind::Cosine => {
            let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
            if na == 0.0 && nb == 0.0 {
                0.0
            } else if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                (1.0 - a.dot(&b) / (na * nb)).clamp(0.0, 2.0)
            }
        }
        MetricKind::Random => 0.0,
    })
}

/// `A·(a-b)` for the learned metric, kept for the backward pass.
pub(crate) fn projected_delta(a: &Array2<f64>, x: ArrayView1<f64>, y: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let delta = &x - &y;
    (a.dot(&delta), delta)
}
