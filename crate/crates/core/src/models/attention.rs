use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Result, SagError};

/// Row-wise softmax, shifted by the row max.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Scaled dot-product similarity and the attention each patch receives.
///
/// Returns `A = softmax(q k^T / sqrt(d_k))` (rows sum to one) and its column
/// mean, a distribution over patches.
pub fn transformer_attention(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    if q.dim() != k.dim() || q.ncols() == 0 || q.nrows() == 0 {
        return Err(SagError::shape(
            format!("matching nonempty q/k, q is {:?}", q.dim()),
            format!("k {:?}", k.dim()),
        ));
    }
    if q.iter().chain(k.iter()).any(|v| !v.is_finite()) {
        return Err(SagError::NonFinite("attention inputs"));
    }
    Ok(attention_unchecked(q, k))
}

pub(crate) fn attention_unchecked(q: ArrayView2<f64>, k: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut a = q.dot(&k.t());
    a.mapv_inplace(|v| v * scale);
    softmax_rows(&mut a);
    let ma = a.mean_axis(Axis(0)).expect("nonempty attention");
    (a, ma)
}

/// Back-propagates `d_a` (gradient w.r.t. `A`) to `(dq, dk)`.
pub(crate) fn attention_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    a: &Array2<f64>,
    d_a: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut ds = d_a * a;
    let row_dots = ds.sum_axis(Axis(1));
    for ((i, j), v) in ds.indexed_iter_mut() {
        *v = (*v - a[[i, j]] * row_dots[i]) * scale;
    }
    (ds.dot(&k), ds.t().dot(&q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_queries_give_uniform_attention() {
        let q = Array2::<f64>::zeros((5, 3));
        let k = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.7 - 2.0);
        let (a, ma) = transformer_attention(q.view(), k.view()).unwrap();
        assert!(a.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(ma.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_patch_hand_example() {
        // With d_k = 1 the logits equal q k^T: [[0, ln 3], [0, 0]].
        let q = array![[3f64.ln()], [0.0]];
        let k = array![[0.0], [1.0]];
        let (a, ma) = transformer_attention(q.view(), k.view()).unwrap();
        let want = array![[0.25, 0.75], [0.5, 0.5]];
        assert!((&a - &want).iter().all(|d| d.abs() < 1e-15));
        assert!((ma[0] - 0.375).abs() < 1e-15 && (ma[1] - 0.625).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let q = Array2::<f64>::zeros((2, 2));
        assert!(transformer_attention(q.view(), Array2::zeros((3, 2)).view()).is_err());
        let mut k = Array2::<f64>::zeros((2, 2));
        k[[0, 1]] = f64::NAN;
        assert!(transformer_attention(q.view(), k.view()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let q = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.5);
        let k = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 2 + j * 5) % 7) as f64 * 0.2 - 0.6);
        let w = Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 - j as f64) * 0.1 + 0.05);
        let f = |q: &Array2<f64>, k: &Array2<f64>| (attention_unchecked(q.view(), k.view()).0 * &w).sum();
        let (a, _) = attention_unchecked(q.view(), k.view());
        let (dq, dk) = attention_backward(q.view(), k.view(), &a, &w);
        let h = 1e-6;
        for idx in 0..12 {
            let (i, j) = (idx / 3, idx % 3);
            let mut qp = q.clone();
            qp[[i, j]] += h;
            let mut qm = q.clone();
            qm[[i, j]] -= h;
            let num = (f(&qp, &k) - f(&qm, &k)) / (2.0 * h);
            assert!((num - dq[[i, j]]).abs() < 1e-8, "dq {i},{j}");
            let mut kp = k.clone();
            kp[[i, j]] += h;
            let mut km = k.clone();
            km[[i, j]] -= h;
            let num = (f(&q, &kp) - f(&q, &km)) / (2.0 * h);
            assert!((num - dk[[i, j]]).abs() < 1e-8, "dk {i},{j}");
        }
    }
}
