//! Distribution router: two ReLU encoders, reparameterized noise and
//! noisy top-k gating.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, DuetError, Result};
use crate::linalg::{relu, softplus, vec_mat};

/// Weights of the mean/spread encoders and of the gate projection.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    /// `T × d0`
    pub w0_mu: Array2<f64>,
    /// `d0 × M`
    pub w1_mu: Array2<f64>,
    /// `T × d0`
    pub w0_sigma: Array2<f64>,
    /// `d0 × M`
    pub w1_sigma: Array2<f64>,
    /// `M × M`, applied as `H = WH · z`.
    pub wh: Array2<f64>,
}

impl RouterParams {
    pub fn zeros(lookback: usize, router_hidden: usize, experts: usize) -> Self {
        Self {
            w0_mu: Array2::zeros((lookback, router_hidden)),
            w1_mu: Array2::zeros((router_hidden, experts)),
            w0_sigma: Array2::zeros((lookback, router_hidden)),
            w1_sigma: Array2::zeros((router_hidden, experts)),
            wh: Array2::zeros((experts, experts)),
        }
    }

    pub fn lookback(&self) -> usize {
        self.w0_mu.nrows()
    }

    pub fn experts(&self) -> usize {
        self.wh.nrows()
    }
}

/// Which extractors a channel was routed to, and with what weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSelection {
    /// Gate logits `H` over all `M` extractors.
    pub logits: Vec<f64>,
    /// The `k` selected extractor ids, ascending.
    pub indices: Vec<usize>,
    /// Softmax weights aligned with `indices`.
    pub weights: Vec<f64>,
    /// The noise draw `ε` behind the logits (all zero in eval mode).
    pub noise: Vec<f64>,
}

impl GateSelection {
    /// Weights scattered over all `M` extractors, zero where unselected.
    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.logits.len()];
        for (&i, &w) in self.indices.iter().zip(&self.weights) {
            out[i] = w;
        }
        out
    }

    /// The degenerate gate of a one-extractor cluster.
    pub fn single() -> Self {
        Self {
            logits: vec![0.0],
            indices: vec![0],
            weights: vec![1.0],
            noise: vec![0.0],
        }
    }
}

/// Intermediate activations of both encoders, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct EncoderTrace {
    pub pre_mu: Array1<f64>,
    pub pre_sigma: Array1<f64>,
    pub mu: Array1<f64>,
    pub sigma_raw: Array1<f64>,
}

pub(crate) fn encode_traced(x: ArrayView1<f64>, p: &RouterParams) -> Result<EncoderTrace> {
    if x.len() != p.lookback() {
        return Err(shape_mismatch("router input", p.lookback(), x.len()));
    }
    let pre_mu = vec_mat(x, &p.w0_mu);
    let pre_sigma = vec_mat(x, &p.w0_sigma);
    let mu = vec_mat(relu(&pre_mu).view(), &p.w1_mu);
    let sigma_raw = vec_mat(relu(&pre_sigma).view(), &p.w1_sigma);
    Ok(EncoderTrace {
        pre_mu,
        pre_sigma,
        mu,
        sigma_raw,
    })
}

/// Returns `(mu, sigma_raw)`; `sigma_raw` is the spread before softplus.
pub fn encode_distribution(
    x: ArrayView1<f64>,
    params: &RouterParams,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let t = encode_traced(x, params)?;
    Ok((t.mu, t.sigma_raw))
}

/// `H = WH · (mu + eps ⊙ softplus(sigma_raw))`.
pub fn sample_gate_logits(
    mu: ArrayView1<f64>,
    sigma_raw: ArrayView1<f64>,
    eps: ArrayView1<f64>,
    params: &RouterParams,
) -> Array1<f64> {
    let z = latent_sample(mu, sigma_raw, eps);
    params.wh.dot(&z)
}

pub(crate) fn latent_sample(
    mu: ArrayView1<f64>,
    sigma_raw: ArrayView1<f64>,
    eps: ArrayView1<f64>,
) -> Array1<f64> {
    let mut z = mu.to_owned();
    for ((zi, &e), &s) in z.iter_mut().zip(eps).zip(sigma_raw) {
        if e != 0.0 {
            *zi += e * softplus(s);
        }
    }
    z
}

/// Keeps the `k` largest logits (ties go to the lower index) and
/// softmaxes over just those.
pub fn keep_top_k(logits: ArrayView1<f64>, k: usize) -> Result<GateSelection> {
    let m = logits.len();
    if k == 0 || k > m {
        return Err(DuetError::InvalidK { k, experts: m });
    }
    let mut order: Vec<usize> = (0..m).collect();
    // Stable sort on descending logits keeps lower indices first on ties.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    let max = indices
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = indices.iter().map(|&i| (logits[i] - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(GateSelection {
        logits: logits.to_vec(),
        indices,
        weights: exps.into_iter().map(|e| e / sum).collect(),
        noise: vec![0.0; m],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(t: usize, d0: usize, m: usize, seed: u64) -> RouterParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        RouterParams {
            w0_mu: g(t, d0),
            w1_mu: g(d0, m),
            w0_sigma: g(t, d0),
            w1_sigma: g(d0, m),
            wh: g(m, m),
        }
    }

    /// Independent triple-loop evaluation of `ReLU(x·W0)·W1`.
    fn encoder_oracle(x: &[f64], w0: &Array2<f64>, w1: &Array2<f64>) -> Vec<f64> {
        let (t, d0) = w0.dim();
        let m = w1.ncols();
        let mut hidden = vec![0.0; d0];
        for j in 0..d0 {
            let mut acc = 0.0;
            for i in 0..t {
                acc += x[i] * w0[[i, j]];
            }
            hidden[j] = if acc > 0.0 { acc } else { 0.0 };
        }
        (0..m)
            .map(|c| (0..d0).map(|j| hidden[j] * w1[[j, c]]).sum())
            .collect()
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let p = RouterParams::zeros(5, 3, 4);
        let (mu, s) = encode_distribution(array![1.0, -2.0, 3.0, 0.5, 0.0].view(), &p).unwrap();
        assert!(mu.iter().chain(s.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_pass_nonnegative_input() {
        let mut p = RouterParams::zeros(3, 3, 3);
        p.w0_mu = Array2::eye(3);
        p.w1_mu = Array2::eye(3);
        let x = array![0.5, 0.0, 2.0];
        let (mu, _) = encode_distribution(x.view(), &p).unwrap();
        assert_eq!(mu, x);
    }

    #[test]
    fn encoder_matches_loop_oracle() {
        let p = random_params(8, 6, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (mu, s) = encode_distribution(Array1::from(x.clone()).view(), &p).unwrap();
        for (a, b) in mu.iter().zip(encoder_oracle(&x, &p.w0_mu, &p.w1_mu)) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in s.iter().zip(encoder_oracle(&x, &p.w0_sigma, &p.w1_sigma)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        let p = RouterParams::zeros(4, 2, 2);
        assert!(encode_distribution(array![1.0, 2.0].view(), &p).is_err());
    }

    #[test]
    fn noiseless_logits() {
        let p = random_params(2, 2, 3, 1);
        let mu = array![0.3, -1.0, 2.0];
        let s = array![0.1, 0.2, 0.3];
        let h = sample_gate_logits(mu.view(), s.view(), Array1::zeros(3).view(), &p);
        assert_eq!(h, p.wh.dot(&mu));
    }

    #[test]
    fn vanishing_spread_ignores_noise() {
        let p = random_params(2, 2, 3, 2);
        let mu = array![0.3, -1.0, 2.0];
        let s = Array1::from_elem(3, -1000.0);
        let h = sample_gate_logits(mu.view(), s.view(), array![5.0, -3.0, 8.0].view(), &p);
        let expected = p.wh.dot(&mu);
        for (a, b) in h.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top_two_of_four() {
        let g = keep_top_k(array![2.0, 1.0, 0.0, -1.0].view(), 2).unwrap();
        assert_eq!(g.indices, vec![0, 1]);
        // softmax([2, 1]) = [e/(e+1), 1/(e+1)]
        let e = std::f64::consts::E;
        assert!((g.weights[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.weights[0] - 0.73106).abs() < 1e-5);
        assert!((g.weights[1] - 0.26894).abs() < 1e-5);
        assert_eq!(g.dense()[2], 0.0);
        assert_eq!(g.dense()[3], 0.0);
    }

    #[test]
    fn full_k_is_plain_softmax() {
        let h = array![0.5, -0.25, 1.5];
        let g = keep_top_k(h.view(), 3).unwrap();
        let z: f64 = h.iter().map(|v| v.exp()).sum();
        for (i, w) in g.dense().iter().enumerate() {
            assert!((w - h[i].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_go_to_lower_index() {
        let g = keep_top_k(array![1.0, 1.0, 1.0, 1.0].view(), 2).unwrap();
        assert_eq!(g.indices, vec![0, 1]);
        assert_eq!(g.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn k_out_of_range() {
        assert!(matches!(
            keep_top_k(array![1.0, 2.0].view(), 3),
            Err(DuetError::InvalidK { k: 3, experts: 2 })
        ));
        assert!(keep_top_k(array![1.0].view(), 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn gates_are_sparse_simplex_points(
            h in proptest::collection::vec(-20.0f64..20.0, 1..9),
            k_frac in 0.0f64..1.0,
        ) {
            let m = h.len();
            let k = 1 + ((m - 1) as f64 * k_frac) as usize;
            let g = keep_top_k(Array1::from(h).view(), k).unwrap();
            let dense = g.dense();
            proptest::prop_assert_eq!(g.indices.len(), k);
            proptest::prop_assert!(g.indices.windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert!(dense.iter().all(|&w| w >= 0.0));
            proptest::prop_assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let zeros = dense.iter().enumerate().filter(|(i, _)| !g.indices.contains(i)).count();
            proptest::prop_assert_eq!(zeros, m - k);
        }
    }
}
