//! Small dense helpers shared by the forward and backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};

/// `y += a · x`. Plain slice loops vectorize; ndarray's `scaled_add` on
/// short rows does not.
fn axpy(mut y: ArrayViewMut1<f64>, a: f64, x: ArrayView1<f64>) {
    match (y.as_slice_mut(), x.as_slice()) {
        (Some(ys), Some(xs)) => {
            for (yi, &xi) in ys.iter_mut().zip(xs) {
                *yi += a * xi;
            }
        }
        _ => y.scaled_add(a, &x),
    }
}

/// `m += scale · a ⊗ b`.
pub(crate) fn add_outer(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>, scale: f64) {
    for (i, row) in m.rows_mut().into_iter().enumerate() {
        let s = scale * a[i];
        if s != 0.0 {
            axpy(row, s, b);
        }
    }
}

/// `x · W` as a sum of scaled rows of `W`. ndarray's generic vector-matrix
/// product walks `W` by columns, which is several times slower here.
pub(crate) fn vec_mat(x: ArrayView1<f64>, w: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(w.ncols());
    vec_mat_add(&mut out, x, w);
    out
}

/// `out += x · W`.
pub(crate) fn vec_mat_add(out: &mut Array1<f64>, x: ArrayView1<f64>, w: &Array2<f64>) {
    for (&xi, row) in x.iter().zip(w.rows()) {
        axpy(out.view_mut(), xi, row);
    }
}

pub(crate) fn relu(v: &Array1<f64>) -> Array1<f64> {
    v.mapv(|x| x.max(0.0))
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p() + z.max(0.0)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax of each row in place.
pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn sigmoid_matches_definition() {
        for z in [-30.0, -1.0, 0.0, 2.5, 40.0] {
            let direct = 1.0 / (1.0 + f64::exp(-z));
            assert!((sigmoid(z) - direct).abs() < 1e-15);
        }
    }
}
