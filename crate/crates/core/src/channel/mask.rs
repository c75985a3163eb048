use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::error::{shape_mismatch, DuetError, Result};
use crate::linalg::sigmoid;
use crate::Mode;

/// Distances, inverse-distance relationships and connection probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRelation {
    pub d: Array2<f64>,
    pub c: Array2<f64>,
    pub p: Array2<f64>,
    /// Column attaining each row's maximum of `c` (None when the row is empty).
    pub(crate) row_max: Vec<Option<usize>>,
}

/// `C = 1/max(D, floor)` off the diagonal, `P = γ·C / rowmax(C)`, `P_ii = 1`.
pub fn build_probability_matrix(
    d: ArrayView2<f64>,
    gamma: f64,
    d_floor: f64,
) -> Result<ChannelRelation> {
    let (n, n2) = d.dim();
    if n != n2 || n == 0 {
        return Err(shape_mismatch("distance matrix", (n, n), (n, n2)));
    }
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            asym = asym.max((d[[i, j]] - d[[j, i]]).abs());
        }
    }
    if asym > 1e-6 || asym.is_nan() {
        return Err(DuetError::AsymmetricDistance(asym));
    }
    let c = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            1.0 / d[[i, j]].max(d_floor)
        }
    });
    let mut p = Array2::eye(n);
    let mut row_max = Vec::with_capacity(n);
    for i in 0..n {
        let best = (0..n)
            .filter(|&j| j != i)
            .fold(None, |acc: Option<usize>, j| match acc {
                Some(b) if c[[i, b]] >= c[[i, j]] => Some(b),
                _ => Some(j),
            });
        if let Some(b) = best {
            let max = c[[i, b]];
            for j in (0..n).filter(|&j| j != i) {
                p[[i, j]] = gamma * (c[[i, j]] / max);
            }
        }
        row_max.push(best);
    }
    Ok(ChannelRelation {
        d: d.to_owned(),
        c,
        p,
        row_max,
    })
}

/// Binary channel mask with unit diagonal.
///
/// In train mode the Gumbel-softmax class-1 probabilities are kept as the
/// straight-through surrogate: the forward pass uses `hard`, the backward
/// pass differentiates the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    pub hard: Array2<f64>,
    pub surrogate: Option<Array2<f64>>,
    /// `∂surrogate/∂P` per entry, zero where clamped or short-circuited.
    pub(crate) dsurrogate_dp: Option<Array2<f64>>,
}

impl ChannelMask {
    /// A fixed mask; entries must be 0/1 with a unit diagonal.
    pub fn from_hard(hard: Array2<f64>) -> Result<Self> {
        let (n, n2) = hard.dim();
        if n != n2 {
            return Err(shape_mismatch("channel mask", (n, n), (n, n2)));
        }
        if hard.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(DuetError::InvalidConfig("mask entries must be 0 or 1".into()));
        }
        if let Some(i) = (0..n).find(|&i| hard[[i, i]] != 1.0) {
            return Err(DuetError::DeadRow(i));
        }
        Ok(Self {
            hard,
            surrogate: None,
            dsurrogate_dp: None,
        })
    }

    /// Each channel sees only itself.
    pub fn identity(n: usize) -> Self {
        Self::from_hard(Array2::eye(n)).expect("identity is a valid mask")
    }

    /// Every channel sees every channel.
    pub fn ones(n: usize) -> Self {
        Self::from_hard(Array2::ones((n, n))).expect("all-ones is a valid mask")
    }

    pub fn channels(&self) -> usize {
        self.hard.nrows()
    }
}

/// How masks are drawn from probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSettings {
    pub temperature: f64,
    pub p_eps: f64,
    /// Eval-mode cut: `M_ij = 1` iff `P_ij ≥ threshold`.
    pub threshold: f64,
    /// Ignore `P` and flip a fair coin per off-diagonal entry.
    pub random: bool,
}

impl Default for MaskSettings {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            p_eps: 1e-6,
            threshold: 0.5,
            random: false,
        }
    }
}

/// Draws a binary mask from `rel.p`.
///
/// Train mode runs a two-class Gumbel-softmax per off-diagonal entry over
/// logits `(ln P, ln(1-P))`, consuming two Gumbel draws per entry in
/// row-major order. Eval mode thresholds `P`. The random setting consumes
/// one coin per entry in either mode.
pub fn sample_mask<R: Rng + ?Sized>(
    rel: &ChannelRelation,
    settings: &MaskSettings,
    mode: Mode,
    rng: &mut R,
) -> ChannelMask {
    let n = rel.p.nrows();
    let mut hard = Array2::eye(n);
    if settings.random {
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                hard[[i, j]] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            }
        }
        return ChannelMask {
            hard,
            surrogate: None,
            dsurrogate_dp: None,
        };
    }
    match mode {
        Mode::Eval => {
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    if rel.p[[i, j]] >= settings.threshold {
                        hard[[i, j]] = 1.0;
                    }
                }
            }
            ChannelMask {
                hard,
                surrogate: None,
                dsurrogate_dp: None,
            }
        }
        Mode::Train => {
            let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
            let tau = settings.temperature;
            let mut soft = Array2::eye(n);
            let mut grad = Array2::zeros((n, n));
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let p = rel.p[[i, j]];
                    let g1: f64 = gumbel.sample(rng);
                    let g0: f64 = gumbel.sample(rng);
                    if p <= 0.0 || p >= 1.0 {
                        let v = if p >= 1.0 { 1.0 } else { 0.0 };
                        hard[[i, j]] = v;
                        soft[[i, j]] = v;
                        continue;
                    }
                    let clamped = p.clamp(settings.p_eps, 1.0 - settings.p_eps);
                    let one = clamped.ln() + g1;
                    let zero = (1.0 - clamped).ln() + g0;
                    let y = sigmoid((one - zero) / tau);
                    hard[[i, j]] = if one > zero { 1.0 } else { 0.0 };
                    soft[[i, j]] = y;
                    if clamped == p {
                        grad[[i, j]] = y * (1.0 - y) / tau * (1.0 / p + 1.0 / (1.0 - p));
                    }
                }
            }
            ChannelMask {
                hard,
                surrogate: Some(soft),
                dsurrogate_dp: Some(grad),
            }
        }
    }
}

/// Gradient of the loss w.r.t. `C`, given `∂L/∂P`.
pub(crate) fn backprop_probability(rel: &ChannelRelation, d_p: ArrayView2<f64>, gamma: f64) -> Array2<f64> {
    let n = rel.p.nrows();
    let mut d_c = Array2::zeros((n, n));
    for i in 0..n {
        let Some(b) = rel.row_max[i] else { continue };
        let max = rel.c[[i, b]];
        let mut d_max = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            d_c[[i, j]] += d_p[[i, j]] * gamma / max;
            d_max -= d_p[[i, j]] * gamma * rel.c[[i, j]] / (max * max);
        }
        d_c[[i, b]] += d_max;
    }
    d_c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_channel_probabilities() {
        let rel = build_probability_matrix(array![[0.0, 2.0], [2.0, 0.0]].view(), 0.9, 1e-8).unwrap();
        assert_eq!(rel.c[[0, 1]], 0.5);
        assert_eq!(rel.p, array![[1.0, 0.9], [0.9, 1.0]]);
    }

    #[test]
    fn single_channel() {
        let rel = build_probability_matrix(array![[0.0]].view(), 0.9, 1e-8).unwrap();
        assert_eq!(rel.p, array![[1.0]]);
    }

    #[test]
    fn zero_distance_is_floored() {
        let rel = build_probability_matrix(array![[0.0, 0.0], [0.0, 0.0]].view(), 0.7, 1e-8).unwrap();
        assert_eq!(rel.c[[0, 1]], 1e8);
        assert_eq!(rel.p[[0, 1]], 0.7);
        assert!(rel.p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn asymmetric_distances_are_rejected() {
        assert!(matches!(
            build_probability_matrix(array![[0.0, 1.0], [2.0, 0.0]].view(), 0.9, 1e-8),
            Err(DuetError::AsymmetricDistance(_))
        ));
    }

    #[test]
    fn rows_peak_at_gamma() {
        let d = array![[0.0, 1.0, 4.0], [1.0, 0.0, 2.0], [4.0, 2.0, 0.0]];
        let rel = build_probability_matrix(d.view(), 0.8, 1e-8).unwrap();
        for i in 0..3 {
            assert_eq!(rel.p[[i, i]], 1.0);
            let off: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| rel.p[[i, j]]).collect();
            assert!(off.iter().all(|&v| (0.0..=0.8).contains(&v)));
            assert_eq!(off.iter().cloned().fold(0.0, f64::max), 0.8);
        }
        // Row normalization makes P asymmetric for N = 3.
        assert_ne!(rel.p[[0, 2]], rel.p[[2, 0]]);
    }

    fn relation_with(p: Array2<f64>) -> ChannelRelation {
        let n = p.nrows();
        ChannelRelation {
            d: Array2::zeros((n, n)),
            c: Array2::zeros((n, n)),
            p,
            row_max: vec![None; n],
        }
    }

    #[test]
    fn certain_and_impossible_links() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = MaskSettings::default();
        for mode in [Mode::Train, Mode::Eval] {
            let m = sample_mask(&relation_with(Array2::<f64>::ones((3, 3))), &s, mode, &mut rng);
            assert_eq!(m.hard, Array2::<f64>::ones((3, 3)));
            let m = sample_mask(&relation_with(Array2::eye(3)), &s, mode, &mut rng);
            assert_eq!(m.hard, Array2::<f64>::eye(3));
        }
    }

    #[test]
    fn bernoulli_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rel = relation_with(array![[1.0, 0.7], [0.3, 1.0]]);
        let s = MaskSettings::default();
        let draws = 10_000;
        let mut hits = [0usize; 2];
        for _ in 0..draws {
            let m = sample_mask(&rel, &s, Mode::Train, &mut rng);
            assert_eq!((m.hard[[0, 0]], m.hard[[1, 1]]), (1.0, 1.0));
            hits[0] += m.hard[[0, 1]] as usize;
            hits[1] += m.hard[[1, 0]] as usize;
        }
        assert!((hits[0] as f64 / draws as f64 - 0.7).abs() < 0.02);
        assert!((hits[1] as f64 / draws as f64 - 0.3).abs() < 0.02);
    }

    #[test]
    fn eval_thresholds() {
        let rel = relation_with(array![[1.0, 0.5, 0.49], [0.9, 1.0, 0.1], [0.0, 0.6, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_mask(&rel, &MaskSettings::default(), Mode::Eval, &mut rng);
        assert_eq!(m.hard, array![[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0]]);
        assert!(m.surrogate.is_none());
    }

    #[test]
    fn random_mask_is_a_fair_coin() {
        let rel = relation_with(array![[1.0, 0.0], [0.0, 1.0]]);
        let s = MaskSettings {
            random: true,
            ..MaskSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ones: f64 = (0..4000)
            .map(|_| sample_mask(&rel, &s, Mode::Eval, &mut rng).hard[[0, 1]])
            .sum();
        assert!((ones / 4000.0 - 0.5).abs() < 0.03);
    }

    #[test]
    fn from_hard_validates() {
        assert!(ChannelMask::from_hard(array![[1.0, 0.5], [0.0, 1.0]]).is_err());
        assert!(matches!(
            ChannelMask::from_hard(array![[1.0, 1.0], [1.0, 0.0]]),
            Err(DuetError::DeadRow(1))
        ));
    }
}
