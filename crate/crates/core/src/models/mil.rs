//! Attention-MIL pooling: `a = softmax(tanh(X Wa + ba) wv)`, pooled `a^T X`.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::attention::softmax;
use super::params::ScaleSlots;

#[derive(Debug, Clone)]
pub(crate) struct ScaleCache {
    t: Array2<f64>,
    pub(crate) attention: Array1<f64>,
    pub(crate) pooled: Array1<f64>,
}

pub(crate) fn forward_scale(slots: &ScaleSlots, data: &[f64], features: &Array2<f64>) -> ScaleCache {
    let ScaleSlots::Mil { wa, ba, wv } = slots else {
        unreachable!("MIL forward on transformer slots");
    };
    let mut t = features.dot(&wa.mat(data));
    t += &ba.vec(data);
    t.mapv_inplace(f64::tanh);
    let scores = t.dot(&wv.mat(data)).remove_axis(Axis(1));
    let attention = Array1::from(softmax(scores.as_slice().expect("contiguous")));
    let pooled = attention.dot(features);
    ScaleCache { t, attention, pooled }
}

pub(crate) fn backward_scale(
    slots: &ScaleSlots,
    data: &[f64],
    features: &Array2<f64>,
    cache: &ScaleCache,
    d_pooled: ArrayView1<f64>,
    d_attention: Option<&[f64]>,
    grads: &mut [f64],
) {
    let ScaleSlots::Mil { wa, ba, wv } = slots else {
        unreachable!("MIL backward on transformer slots");
    };
    let mut d_a = features.dot(&d_pooled);
    if let Some(g) = d_attention {
        d_a += &ArrayView1::from(g);
    }
    let a = &cache.attention;
    let mean = a.dot(&d_a);
    let d_scores = a * &(d_a - mean);
    let wv_col = wv.mat(data).column(0).to_owned();
    wv.mat_mut(grads).column_mut(0).scaled_add(1.0, &cache.t.t().dot(&d_scores));
    let mut d_u = Array2::zeros(cache.t.raw_dim());
    for ((i, j), g) in d_u.indexed_iter_mut() {
        let t: f64 = cache.t[[i, j]];
        *g = d_scores[i] * wv_col[j] * (1.0 - t * t);
    }
    wa.mat_mut(grads).scaled_add(1.0, &features.t().dot(&d_u));
    ba.vec_mut(grads).scaled_add(1.0, &d_u.sum_axis(Axis(0)));
}
