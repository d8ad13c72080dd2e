//! Attention-guiding objective.
//!
//! Three task losses are combined with learned homoscedastic-uncertainty
//! weights: slide cross-entropy, the squared deviation of attention from
//! heuristic guidance, and the signed in&out tissue loss.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SagError};
use crate::guidance::GuidanceWeights;
use crate::models::{AttentionGrads, AttentionKey, AttentionRecord, HeadPartition, TASK_CLS, TASK_INOUT, TASK_MSE};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(SagError::shape(format!("length {a}"), format!("length {b}")));
    }
    Ok(())
}

/// `(1/p) * sum_i (hg_i - ma_i)^2`.
pub fn loss_mse(hg: &[f64], ma: &[f64]) -> Result<f64> {
    check_len(hg.len(), ma.len())?;
    let p = ma.len() as f64;
    Ok(hg.iter().zip(ma).map(|(w, m)| (w - m).powi(2)).sum::<f64>() / p)
}

/// Gradient of [`loss_mse`] w.r.t. `ma`.
pub fn loss_mse_grad(hg: &[f64], ma: &[f64]) -> Vec<f64> {
    let p = ma.len() as f64;
    hg.iter().zip(ma).map(|(w, m)| 2.0 * (m - w) / p).collect()
}

/// `(1/p) * (sum of ma outside tissue - sum of ma inside tissue)`, where a
/// patch is inside when its tissue weight is positive.
pub fn loss_inout(tg: &[f64], ma: &[f64]) -> Result<f64> {
    check_len(tg.len(), ma.len())?;
    let p = ma.len() as f64;
    let signed: f64 = tg.iter().zip(ma).map(|(&w, &m)| if w > 0.0 { -m } else { m }).sum();
    Ok(signed / p)
}

/// Gradient of [`loss_inout`] w.r.t. `ma` (constant in `ma`).
pub fn loss_inout_grad(tg: &[f64]) -> Vec<f64> {
    let p = tg.len() as f64;
    tg.iter().map(|&w| if w > 0.0 { -1.0 / p } else { 1.0 / p }).collect()
}

fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    // log(sum exp(l - m)) = ln_1p(sum over all but one maximal entry), which
    // keeps tiny losses accurate when the true class dominates.
    let (argmax, m) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, v)| (v - m).exp())
        .sum();
    let log_norm = rest.ln_1p();
    logits.mapv(|v| (v - m) - log_norm)
}

/// Class probabilities.
pub fn softmax_probs(logits: ArrayView1<f64>) -> Array1<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// Cross-entropy `-log softmax(logits)[label]`.
pub fn loss_cls(logits: ArrayView1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(SagError::InvalidArgument(format!("label {label} out of range for {} classes", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(SagError::NonFinite("logits"));
    }
    Ok(-log_softmax(logits)[label])
}

/// `softmax(logits) - onehot(label)`.
pub fn loss_cls_grad(logits: ArrayView1<f64>, label: usize) -> Array1<f64> {
    let mut g = softmax_probs(logits);
    g[label] -= 1.0;
    g
}

/// Per-task losses entering the uncertainty weighting; `None` marks an
/// inactive task (no guidance of that kind for the bag).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskLosses {
    pub cls: f64,
    pub mse: Option<f64>,
    pub inout: Option<f64>,
}

impl TaskLosses {
    fn slots(&self) -> [Option<f64>; 3] {
        let mut out = [None; 3];
        out[TASK_CLS] = Some(self.cls);
        out[TASK_MSE] = self.mse;
        out[TASK_INOUT] = self.inout;
        out
    }
}

/// `sum_k exp(-s_k) * L_k + s_k` over active tasks.
pub fn uncertainty_weighted_total(parts: TaskLosses, log_vars: [f64; 3]) -> Result<f64> {
    let mut total = 0.0;
    for (l, s) in parts.slots().into_iter().zip(log_vars) {
        if let Some(l) = l {
            if !l.is_finite() || !s.is_finite() {
                return Err(SagError::NonFinite("uncertainty weighting input"));
            }
            total += (-s).exp() * l + s;
        }
    }
    Ok(total)
}

/// Partial derivatives of [`uncertainty_weighted_total`]: `(d/dL_k, d/ds_k)`.
pub fn uncertainty_weighted_grads(parts: TaskLosses, log_vars: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let mut d_loss = [0.0; 3];
    let mut d_s = [0.0; 3];
    for (k, l) in parts.slots().into_iter().enumerate() {
        if let Some(l) = l {
            let w = (-log_vars[k]).exp();
            d_loss[k] = w;
            d_s[k] = 1.0 - w * l;
        }
    }
    (d_loss, d_s)
}

/// What the heuristic-guidance loss compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseTarget {
    /// Each HG-supervised head separately.
    #[default]
    PerHead,
    /// The mean attention of a layer's HG-supervised heads.
    HeadMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SagLossOptions {
    pub mse_target: MseTarget,
    /// Feed `l_inout + mean(1/p)` (which is nonnegative) to the uncertainty
    /// weighting instead of the signed `l_inout`. The signed form is
    /// unbounded below in its log-variance.
    pub shift_inout: bool,
}

impl Default for SagLossOptions {
    fn default() -> Self {
        Self { mse_target: MseTarget::PerHead, shift_inout: false }
    }
}

/// Guidance available for one scale of a slide.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScaleGuidance<'a> {
    pub tg: Option<&'a GuidanceWeights>,
    pub hg: Option<&'a GuidanceWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_mse: f64,
    pub l_inout: f64,
    pub weighted_total: f64,
    pub log_variances: [f64; 3],
    /// Number of attention vectors compared against HG.
    pub mse_terms: usize,
    /// Number of attention vectors scored by the in&out loss.
    pub inout_terms: usize,
    /// Scales whose HG / TG was degenerate and therefore skipped.
    pub skipped_hg: usize,
    pub skipped_tg: usize,
}

impl LossBreakdown {
    pub fn mse_active(&self) -> bool {
        self.mse_terms > 0
    }

    pub fn inout_active(&self) -> bool {
        self.inout_terms > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub d_logits: Array1<f64>,
    pub d_attention: AttentionGrads,
    pub d_log_vars: [f64; 3],
}

fn attention_vec(record: &AttentionRecord, key: AttentionKey, p: usize) -> Result<&[f64]> {
    let v = record
        .get(key)
        .ok_or_else(|| SagError::Alignment(format!("no attention recorded for {key:?}")))?;
    if v.len() != p {
        return Err(SagError::Alignment(format!(
            "guidance has {p} patches but attention {key:?} has {}",
            v.len()
        )));
    }
    Ok(v)
}

fn add_grad(grads: &mut AttentionGrads, key: AttentionKey, g: &[f64], scale: f64) {
    let slot = grads.entry(key).or_insert_with(|| vec![0.0; g.len()]);
    for (s, v) in slot.iter_mut().zip(g) {
        *s += v * scale;
    }
}

/// One loss term: its value and its gradient w.r.t. each attention vector
/// it reads.
type Term = (f64, Vec<(AttentionKey, Vec<f64>)>);

/// Averages term values within each scale, then across scales, and routes
/// `d(average)/d(term)` back to the attention vectors.
#[derive(Default)]
struct ScaleAverager {
    per_scale: Vec<(f64, f64, Vec<Term>)>,
}

impl ScaleAverager {
    fn push_scale(&mut self, terms: Vec<Term>) {
        if terms.is_empty() {
            return;
        }
        let n = terms.len() as f64;
        let mean = terms.iter().map(|t| t.0).sum::<f64>() / n;
        self.per_scale.push((mean, 1.0 / n, terms));
    }

    fn value(&self) -> Option<f64> {
        (!self.per_scale.is_empty())
            .then(|| self.per_scale.iter().map(|s| s.0).sum::<f64>() / self.per_scale.len() as f64)
    }

    fn emit(&self, grads: &mut AttentionGrads, outer: f64) {
        let inv = outer / self.per_scale.len() as f64;
        for (_, inv_n, terms) in &self.per_scale {
            for (_, parts) in terms {
                for (k, g) in parts {
                    add_grad(grads, *k, g, inv * inv_n);
                }
            }
        }
    }
}

/// Unweighted task losses of one slide and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SagTerms {
    pub l_cls: f64,
    pub l_mse: Option<f64>,
    pub l_inout: Option<f64>,
    /// Offset added to `l_inout` before uncertainty weighting.
    pub inout_shift: f64,
    pub grad_cls: Array1<f64>,
    pub grad_mse: AttentionGrads,
    pub grad_inout: AttentionGrads,
    pub mse_terms: usize,
    pub inout_terms: usize,
    pub skipped_hg: usize,
    pub skipped_tg: usize,
}

/// Evaluates the three task losses.
///
/// `l_mse` averages over HG-supervised heads, `l_inout` over TG-supervised
/// heads, each first within a scale and then across scales. `guidance`
/// holds one entry per scale, or is empty for an unguided bag. Degenerate
/// guidance on a scale is skipped and counted.
pub fn sag_terms(
    logits: ArrayView1<f64>,
    label: usize,
    record: &AttentionRecord,
    guidance: &[ScaleGuidance],
    partition: &HeadPartition,
    opts: SagLossOptions,
) -> Result<SagTerms> {
    let l_cls = loss_cls(logits, label)?;
    let n_scales = record.scales();
    if !guidance.is_empty() && guidance.len() != n_scales {
        return Err(SagError::Alignment(format!(
            "{} guidance scales for {n_scales} attention scales",
            guidance.len()
        )));
    }

    let mut mse = ScaleAverager::default();
    let mut inout = ScaleAverager::default();
    let (mut mse_terms, mut inout_terms, mut skipped_hg, mut skipped_tg) = (0, 0, 0, 0);
    let mut inv_p_sum = 0.0;

    for (s, g) in guidance.iter().enumerate() {
        if let Some(hg) = g.hg {
            if hg.degenerate {
                skipped_hg += 1;
            } else {
                let p = hg.len();
                let mut terms: Vec<Term> = Vec::new();
                match opts.mse_target {
                    MseTarget::PerHead => {
                        for &(l, h) in &partition.hg {
                            let key = AttentionKey::new(s, l, h);
                            let ma = attention_vec(record, key, p)?;
                            terms.push((loss_mse(&hg.weights, ma)?, vec![(key, loss_mse_grad(&hg.weights, ma))]));
                        }
                    }
                    MseTarget::HeadMean => {
                        let mut layers: Vec<usize> = partition.hg.iter().map(|&(l, _)| l).collect();
                        layers.dedup();
                        for l in layers {
                            let heads = partition.hg_heads_in_layer(l);
                            let share = 1.0 / heads.len() as f64;
                            let mut avg = vec![0.0; p];
                            for &h in &heads {
                                let ma = attention_vec(record, AttentionKey::new(s, l, h), p)?;
                                for (a, v) in avg.iter_mut().zip(ma) {
                                    *a += v * share;
                                }
                            }
                            let g: Vec<f64> = loss_mse_grad(&hg.weights, &avg).into_iter().map(|v| v * share).collect();
                            let parts = heads.iter().map(|&h| (AttentionKey::new(s, l, h), g.clone())).collect();
                            terms.push((loss_mse(&hg.weights, &avg)?, parts));
                        }
                    }
                }
                mse_terms += terms.len();
                mse.push_scale(terms);
            }
        }
        if let Some(tg) = g.tg {
            if tg.degenerate {
                skipped_tg += 1;
            } else {
                let p = tg.len();
                let grad = loss_inout_grad(&tg.weights);
                let mut terms: Vec<Term> = Vec::new();
                for &(l, h) in &partition.tg {
                    let key = AttentionKey::new(s, l, h);
                    let ma = attention_vec(record, key, p)?;
                    terms.push((loss_inout(&tg.weights, ma)?, vec![(key, grad.clone())]));
                }
                if !terms.is_empty() {
                    inv_p_sum += 1.0 / p as f64;
                }
                inout_terms += terms.len();
                inout.push_scale(terms);
            }
        }
    }

    let l_mse = mse.value();
    let l_inout = inout.value();
    let inout_shift = if opts.shift_inout && l_inout.is_some() {
        inv_p_sum / inout.per_scale.len() as f64
    } else {
        0.0
    };
    let mut grad_mse = BTreeMap::new();
    if l_mse.is_some() {
        mse.emit(&mut grad_mse, 1.0);
    }
    let mut grad_inout = BTreeMap::new();
    if l_inout.is_some() {
        inout.emit(&mut grad_inout, 1.0);
    }
    Ok(SagTerms {
        l_cls,
        l_mse,
        l_inout,
        inout_shift,
        grad_cls: loss_cls_grad(logits, label),
        grad_mse,
        grad_inout,
        mse_terms,
        inout_terms,
        skipped_hg,
        skipped_tg,
    })
}

impl SagTerms {
    pub fn task_losses(&self) -> TaskLosses {
        TaskLosses { cls: self.l_cls, mse: self.l_mse, inout: self.l_inout.map(|v| v + self.inout_shift) }
    }

    /// Uncertainty-weighted combination.
    pub fn combine(&self, log_vars: [f64; 3]) -> Result<(LossBreakdown, LossGrads)> {
        let parts = self.task_losses();
        let weighted_total = uncertainty_weighted_total(parts, log_vars)?;
        let (d_loss, d_log_vars) = uncertainty_weighted_grads(parts, log_vars);
        let d_logits = &self.grad_cls * d_loss[TASK_CLS];
        let mut d_attention = BTreeMap::new();
        for (grads, w) in [(&self.grad_mse, d_loss[TASK_MSE]), (&self.grad_inout, d_loss[TASK_INOUT])] {
            for (k, g) in grads {
                add_grad(&mut d_attention, *k, g, w);
            }
        }
        let breakdown = LossBreakdown {
            l_cls: self.l_cls,
            l_mse: self.l_mse.unwrap_or(0.0),
            l_inout: self.l_inout.unwrap_or(0.0),
            weighted_total,
            log_variances: log_vars,
            mse_terms: self.mse_terms,
            inout_terms: self.inout_terms,
            skipped_hg: self.skipped_hg,
            skipped_tg: self.skipped_tg,
        };
        Ok((breakdown, LossGrads { d_logits, d_attention, d_log_vars }))
    }
}

/// Full objective for one slide: [`sag_terms`] combined with uncertainty
/// weights `exp(-s_k) * L_k + s_k`.
pub fn sag_loss(
    logits: ArrayView1<f64>,
    label: usize,
    record: &AttentionRecord,
    guidance: &[ScaleGuidance],
    partition: &HeadPartition,
    log_vars: [f64; 3],
    opts: SagLossOptions,
) -> Result<(LossBreakdown, LossGrads)> {
    sag_terms(logits, label, record, guidance, partition, opts)?.combine(log_vars)
}
