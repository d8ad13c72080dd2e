//! Per-scale multi-head self-attention encoder.
//!
//! Each head projects `q = H Wq + bq`, likewise `k` and `v`. Layers before
//! the last update the patch states residually:
//! `H1 = H + concat_h(A_h V_h) Wo` then `H' = H1 + tanh(H1 W1 + b1) W2 + b2`.
//! The last layer pools its values with each head's mean received attention,
//! so the pooled vector is `concat_h(MA_h^T V_h)`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::attention::{attention_backward, attention_unchecked};
use super::params::{HeadSlots, MixSlots, ScaleSlots};
use super::{AttentionGrads, AttentionKey, AttentionRecord};

#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
    ma: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct MixCache {
    concat: Array2<f64>,
    h1: Array2<f64>,
    t: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    input: Array2<f64>,
    heads: Vec<HeadCache>,
    mix: Option<MixCache>,
}

#[derive(Debug, Clone)]
pub(crate) struct ScaleCache {
    layers: Vec<LayerCache>,
    pub(crate) pooled: Array1<f64>,
}

impl ScaleCache {
    pub(crate) fn record(&self, scale: usize, out: &mut AttentionRecord) {
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.entries.insert(AttentionKey::new(scale, l, h), head.ma.to_vec());
            }
        }
    }
}

fn head_forward(slots: &HeadSlots, data: &[f64], input: &Array2<f64>) -> HeadCache {
    let q = input.dot(&slots.wq.mat(data)) + slots.bq.vec(data);
    let k = input.dot(&slots.wk.mat(data)) + slots.bk.vec(data);
    let v = input.dot(&slots.wv.mat(data)) + slots.bv.vec(data);
    let (a, ma) = attention_unchecked(q.view(), k.view());
    HeadCache { q, k, v, a, ma }
}

fn mix_forward(slots: &MixSlots, data: &[f64], input: &Array2<f64>, heads: &[HeadCache]) -> (MixCache, Array2<f64>) {
    let p = input.nrows();
    let dk = heads[0].v.ncols();
    let mut concat = Array2::zeros((p, dk * heads.len()));
    for (h, head) in heads.iter().enumerate() {
        concat.slice_mut(s![.., h * dk..(h + 1) * dk]).assign(&head.a.dot(&head.v));
    }
    let h1 = input + &concat.dot(&slots.wo.mat(data));
    let mut t = h1.dot(&slots.w1.mat(data));
    t += &slots.b1.vec(data);
    t.mapv_inplace(f64::tanh);
    let mut out = &h1 + &t.dot(&slots.w2.mat(data));
    out += &slots.b2.vec(data);
    (MixCache { concat, h1, t }, out)
}

pub(crate) fn forward_scale(
    slots: &ScaleSlots,
    data: &[f64],
    features: &Array2<f64>,
    encoding: &Array2<f64>,
    pe_scale: f64,
) -> ScaleCache {
    let ScaleSlots::Transformer { layers } = slots else {
        unreachable!("transformer forward on MIL slots");
    };
    let mut state = features + &(encoding * pe_scale);
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let heads: Vec<HeadCache> = layer.heads.iter().map(|h| head_forward(h, data, &state)).collect();
        let (mix, next) = match &layer.mix {
            Some(m) => {
                let (c, out) = mix_forward(m, data, &state, &heads);
                (Some(c), Some(out))
            }
            None => (None, None),
        };
        let input = match next {
            Some(out) => std::mem::replace(&mut state, out),
            None => state.clone(),
        };
        caches.push(LayerCache { input, heads, mix });
    }
    let last = caches.last().expect("at least one layer");
    let dk = last.heads[0].v.ncols();
    let mut pooled = Array1::zeros(dk * last.heads.len());
    for (h, head) in last.heads.iter().enumerate() {
        pooled.slice_mut(s![h * dk..(h + 1) * dk]).assign(&head.ma.dot(&head.v));
    }
    ScaleCache { layers: caches, pooled }
}

/// Gradient of one head given `d_a` on its similarity matrix and `d_v` on
/// its values; accumulates projection gradients and returns the gradient on
/// the layer input.
#[allow(clippy::too_many_arguments)]
fn head_backward(
    slots: &HeadSlots,
    data: &[f64],
    input: &Array2<f64>,
    c: &HeadCache,
    d_a: &Array2<f64>,
    d_v: &Array2<f64>,
    grads: &mut [f64],
    d_input: &mut Array2<f64>,
) {
    let (dq, dk) = attention_backward(c.q.view(), c.k.view(), &c.a, d_a);
    let xt = input.t();
    slots.wq.mat_mut(grads).scaled_add(1.0, &xt.dot(&dq));
    slots.wk.mat_mut(grads).scaled_add(1.0, &xt.dot(&dk));
    slots.wv.mat_mut(grads).scaled_add(1.0, &xt.dot(d_v));
    slots.bq.vec_mut(grads).scaled_add(1.0, &dq.sum_axis(Axis(0)));
    slots.bk.vec_mut(grads).scaled_add(1.0, &dk.sum_axis(Axis(0)));
    slots.bv.vec_mut(grads).scaled_add(1.0, &d_v.sum_axis(Axis(0)));
    *d_input += &dq.dot(&slots.wq.mat(data).t());
    *d_input += &dk.dot(&slots.wk.mat(data).t());
    *d_input += &d_v.dot(&slots.wv.mat(data).t());
}

/// `d_a[i, j] += g[j] / p`: the gradient of the column mean.
fn add_column_mean_grad(d_a: &mut Array2<f64>, g: &[f64]) {
    let inv_p = 1.0 / d_a.nrows() as f64;
    for mut row in d_a.rows_mut() {
        for (v, &gj) in row.iter_mut().zip(g) {
            *v += gj * inv_p;
        }
    }
}

pub(crate) fn backward_scale(
    slots: &ScaleSlots,
    data: &[f64],
    cache: &ScaleCache,
    scale: usize,
    d_pooled: ArrayView1<f64>,
    d_attention: &AttentionGrads,
    grads: &mut [f64],
) {
    let ScaleSlots::Transformer { layers } = slots else {
        unreachable!("transformer backward on MIL slots");
    };
    let n_layers = layers.len();
    let last = &cache.layers[n_layers - 1];
    let (p, e) = last.input.dim();
    let mut d_state = Array2::<f64>::zeros((p, e));

    // Last layer: pooled = concat_h(ma_h^T v_h).
    {
        let dk = last.heads[0].v.ncols();
        for (h, (hs, hc)) in layers[n_layers - 1].heads.iter().zip(&last.heads).enumerate() {
            let dz = d_pooled.slice(s![h * dk..(h + 1) * dk]);
            let mut d_ma = hc.v.dot(&dz);
            if let Some(g) = d_attention.get(&AttentionKey::new(scale, n_layers - 1, h)) {
                d_ma += &ArrayView1::from(g.as_slice());
            }
            let mut d_v = Array2::zeros((p, dk));
            for (i, &m) in hc.ma.iter().enumerate() {
                d_v.row_mut(i).scaled_add(m, &dz);
            }
            let mut d_a = Array2::zeros((p, p));
            add_column_mean_grad(&mut d_a, d_ma.as_slice().expect("contiguous"));
            head_backward(hs, data, &last.input, hc, &d_a, &d_v, grads, &mut d_state);
        }
    }

    for l in (0..n_layers - 1).rev() {
        let lc = &cache.layers[l];
        let ls = &layers[l];
        let (mc, ms) = (lc.mix.as_ref().expect("mix cache"), ls.mix.as_ref().expect("mix slots"));
        // d_state is the gradient on this layer's output.
        ms.w2.mat_mut(grads).scaled_add(1.0, &mc.t.t().dot(&d_state));
        ms.b2.vec_mut(grads).scaled_add(1.0, &d_state.sum_axis(Axis(0)));
        let mut d_u = d_state.dot(&ms.w2.mat(data).t());
        d_u.zip_mut_with(&mc.t, |g, &t| *g *= 1.0 - t * t);
        ms.w1.mat_mut(grads).scaled_add(1.0, &mc.h1.t().dot(&d_u));
        ms.b1.vec_mut(grads).scaled_add(1.0, &d_u.sum_axis(Axis(0)));
        let d_h1 = &d_state + &d_u.dot(&ms.w1.mat(data).t());
        ms.wo.mat_mut(grads).scaled_add(1.0, &mc.concat.t().dot(&d_h1));
        let d_concat = d_h1.dot(&ms.wo.mat(data).t());

        let mut d_input = d_h1;
        let dk = lc.heads[0].v.ncols();
        for (h, (hs, hc)) in ls.heads.iter().zip(&lc.heads).enumerate() {
            let d_o = d_concat.slice(s![.., h * dk..(h + 1) * dk]);
            let mut d_a = d_o.dot(&hc.v.t());
            if let Some(g) = d_attention.get(&AttentionKey::new(scale, l, h)) {
                add_column_mean_grad(&mut d_a, g);
            }
            let d_v = hc.a.t().dot(&d_o);
            head_backward(hs, data, &lc.input, hc, &d_a, &d_v, grads, &mut d_input);
        }
        d_state = d_input;
    }
}
