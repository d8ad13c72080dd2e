//! Per-seed training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{classification_metrics, ClassMetrics};
use crate::config::{ExperimentConfig, OptimConfig};
use crate::error::{Result, SagError};
use crate::grid::patchify;
use crate::losses::{loss_cls, loss_cls_grad, sag_loss, softmax_probs, LossBreakdown, SagLossOptions, ScaleGuidance};
use crate::models::{
    select_supervised_heads, AttentionKey, AttentionRecord, Bag, HeadPartition, Model, ModelKind, ModelParams,
    SupervisedLayers, TASK_CLS,
};
use crate::synth::LabeledSlide;

/// Heads receiving each kind of guidance. The MIL backbone has a single
/// attention vector, which receives HG whenever the fraction is positive.
pub fn head_partition(model: &Model, hg_fraction: f64, which: SupervisedLayers) -> Result<HeadPartition> {
    match model.arch.kind {
        ModelKind::Transformer => select_supervised_heads(model.arch.layers, model.arch.heads, hg_fraction, which),
        ModelKind::Mil => {
            if !(0.0..=1.0).contains(&hg_fraction) {
                return Err(SagError::InvalidArgument(format!("hg_head_fraction {hg_fraction} outside [0, 1]")));
            }
            let hg = if hg_fraction > 0.0 { vec![(0, 0)] } else { Vec::new() };
            Ok(HeadPartition { hg, tg: vec![(0, 0)] })
        }
    }
}

/// How the per-slide objective is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPath {
    /// The full guided objective.
    Sag,
    /// Uncertainty-weighted cross-entropy computed directly, without the
    /// guidance machinery. Only valid with guidance off.
    PlainCrossEntropy,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub partition: HeadPartition,
    pub opts: SagLossOptions,
    pub use_hg: bool,
    pub use_tg: bool,
    pub path: LossPath,
}

impl Objective {
    pub fn from_config(cfg: &ExperimentConfig, model: &Model) -> Result<Self> {
        Ok(Self {
            partition: head_partition(model, cfg.guidance.hg_head_fraction, cfg.guidance.supervised_layers)?,
            opts: cfg.loss,
            use_hg: cfg.guidance.use_hg,
            use_tg: cfg.guidance.use_tg,
            path: LossPath::Sag,
        })
    }

    fn guidance<'a>(&self, bags: &'a [Bag]) -> Result<Vec<ScaleGuidance<'a>>> {
        if !self.use_hg && !self.use_tg {
            return Ok(Vec::new());
        }
        bags.iter()
            .map(|b| {
                let missing = |k: &str| SagError::Alignment(format!("bag at scale {} has no {k} guidance", b.scale_id));
                Ok(ScaleGuidance {
                    tg: if self.use_tg { Some(b.guidance.tg.as_ref().ok_or_else(|| missing("TG"))?) } else { None },
                    hg: if self.use_hg { Some(b.guidance.hg.as_ref().ok_or_else(|| missing("HG"))?) } else { None },
                })
            })
            .collect()
    }

    /// Loss of one slide; when `grads` is given, adds the gradient w.r.t.
    /// every parameter, log-variances included.
    pub fn slide(&self, model: &Model, params: &ModelParams, bags: &[Bag], grads: Option<&mut [f64]>) -> Result<LossBreakdown> {
        let fwd = model.forward(params, bags)?;
        let label = bags[0].label;
        let lv = model.layout.log_vars.vec(params.as_flat());
        let log_vars = [lv[0], lv[1], lv[2]];
        let (breakdown, d_logits, d_attention, d_log_vars) = match self.path {
            LossPath::Sag => {
                let guidance = self.guidance(bags)?;
                let (b, g) = sag_loss(fwd.logits.view(), label, &fwd.attention, &guidance, &self.partition, log_vars, self.opts)?;
                (b, g.d_logits, g.d_attention, g.d_log_vars)
            }
            LossPath::PlainCrossEntropy => {
                if self.use_hg || self.use_tg {
                    return Err(SagError::InvalidArgument("plain cross-entropy path with guidance enabled".into()));
                }
                let ce = loss_cls(fwd.logits.view(), label)?;
                let s = log_vars[TASK_CLS];
                let w = (-s).exp();
                let total = w * ce + s;
                let mut d_s = [0.0; 3];
                d_s[TASK_CLS] = 1.0 - w * ce;
                let b = LossBreakdown {
                    l_cls: ce,
                    l_mse: 0.0,
                    l_inout: 0.0,
                    weighted_total: total,
                    log_variances: log_vars,
                    mse_terms: 0,
                    inout_terms: 0,
                    skipped_hg: 0,
                    skipped_tg: 0,
                };
                (b, loss_cls_grad(fwd.logits.view(), label) * w, Default::default(), d_s)
            }
        };
        if let Some(grads) = grads {
            model.backward(params, bags, &fwd, d_logits.view(), &d_attention, grads);
            let mut slot = model.layout.log_vars.vec_mut(grads);
            for (g, d) in slot.iter_mut().zip(d_log_vars) {
                *g += d;
            }
        }
        Ok(breakdown)
    }
}

/// Mean of per-slide breakdowns; term and skip counts are summed.
pub fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_cls: mean(|b| b.l_cls),
        l_mse: mean(|b| b.l_mse),
        l_inout: mean(|b| b.l_inout),
        weighted_total: mean(|b| b.weighted_total),
        log_variances: items.first().map(|b| b.log_variances).unwrap_or_default(),
        mse_terms: items.iter().map(|b| b.mse_terms).sum(),
        inout_terms: items.iter().map(|b| b.inout_terms).sum(),
        skipped_hg: items.iter().map(|b| b.skipped_hg).sum(),
        skipped_tg: items.iter().map(|b| b.skipped_tg).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val: ClassMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub seed: u64,
    pub params: ModelParams,
    /// Batch-mean breakdown of every optimizer step.
    pub steps: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
}

fn clip(grads: &mut [f64], max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            let s = max / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
    }
}

fn diverged(seed: u64, step: usize, e: SagError) -> SagError {
    match e {
        SagError::NonFinite(what) => SagError::Diverged { seed, step, detail: format!("non-finite {what}") },
        other => other,
    }
}

/// SGD with momentum on the batch-mean objective. Initialization and batch
/// order depend only on `seed`.
pub fn train_seed(
    model: &Model,
    objective: &Objective,
    optim: &OptimConfig,
    train: &[LabeledSlide],
    val: &[LabeledSlide],
    seed: u64,
) -> Result<TrainRun> {
    if train.is_empty() {
        return Err(SagError::InvalidArgument("empty training split".into()));
    }
    let lr = optim.step_size(model.arch.kind);
    let mut params = model.init_params(seed);
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(optim.epochs);
    for epoch in 0..optim.epochs {
        order.shuffle(&mut rng);
        let first_step = steps.len();
        for batch in order.chunks(optim.batch_size) {
            let step = steps.len();
            let mut grads = vec![0.0; params.len()];
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let b = objective
                    .slide(model, &params, &train[i].bags, Some(&mut grads))
                    .map_err(|e| diverged(seed, step, e))?;
                parts.push(b);
            }
            let mean = mean_breakdown(&parts);
            if !mean.weighted_total.is_finite() {
                return Err(SagError::Diverged { seed, step, detail: "non-finite loss".into() });
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            clip(&mut grads, optim.clip_norm);
            for ((p, v), g) in params.values.iter_mut().zip(&mut velocity).zip(&grads) {
                *v = optim.momentum * *v + g;
                *p -= lr * *v;
            }
            let (lo, hi) = optim.log_var_bounds;
            model.layout.log_vars.vec_mut(&mut params.values).mapv_inplace(|s| s.clamp(lo, hi));
            if !params.is_finite() {
                return Err(SagError::Diverged { seed, step, detail: "non-finite parameters".into() });
            }
            steps.push(mean);
        }
        let val_metrics = if val.is_empty() {
            ClassMetrics::default()
        } else {
            evaluate(model, &params, val, &[])?.metrics
        };
        let record = EpochRecord { seed, epoch, loss: mean_breakdown(&steps[first_step..]), val: val_metrics };
        log::debug!("seed {seed} epoch {epoch}: loss {:.5} val acc {:.3}", record.loss.weighted_total, record.val.accuracy);
        epochs.push(record);
    }
    Ok(TrainRun { seed, params, steps, epochs })
}

/// Attention mass on lesion patches: `sum_{i in lesion} MA_i` averaged over
/// the listed `(layer, head)` pairs and all scales. `lesion[s]` holds the
/// truth lesion weights of scale `s`; patches with positive weight count.
pub fn attention_quality(att: &AttentionRecord, lesion: &[Vec<f64>], heads: &[(usize, usize)]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (s, weights) in lesion.iter().enumerate() {
        for &(l, h) in heads {
            let key = AttentionKey::new(s, l, h);
            let ma = att.get(key).ok_or_else(|| SagError::Alignment(format!("no attention for {key:?}")))?;
            if ma.len() != weights.len() {
                return Err(SagError::Alignment(format!("{} lesion weights for {} patches", weights.len(), ma.len())));
            }
            total += ma.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(m, _)| m).sum::<f64>();
            n += 1;
        }
    }
    if n == 0 {
        return Err(SagError::InvalidArgument("no attention heads to score".into()));
    }
    Ok(total / n as f64)
}

/// Truth lesion area ratios of each scale.
pub fn lesion_weights(slide: &LabeledSlide) -> Result<Vec<Vec<f64>>> {
    slide.bags.iter().map(|b| Ok(patchify(&slide.truth.lesion, &b.grid)?.values)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: ClassMetrics,
    /// Mean over slides; `None` when no heads were requested.
    pub attention_quality: Option<f64>,
    pub probs: Vec<Vec<f64>>,
}

/// Metrics on `slides`; attention quality over `quality_heads` if nonempty.
pub fn evaluate(model: &Model, params: &ModelParams, slides: &[LabeledSlide], quality_heads: &[(usize, usize)]) -> Result<Evaluation> {
    let mut probs = Vec::with_capacity(slides.len());
    let mut quality = 0.0;
    for s in slides {
        let fwd = model.forward(params, &s.bags)?;
        probs.push(softmax_probs(fwd.logits.view()).to_vec());
        if !quality_heads.is_empty() {
            quality += attention_quality(&fwd.attention, &lesion_weights(s)?, quality_heads)?;
        }
    }
    let labels: Vec<usize> = slides.iter().map(|s| s.label).collect();
    let metrics = classification_metrics(&labels, &probs, model.arch.num_classes)?;
    let attention_quality = (!quality_heads.is_empty()).then(|| quality / slides.len() as f64);
    Ok(Evaluation { metrics, attention_quality, probs })
}

/// Heads scored by [`attention_quality`]: the HG heads, or every supervised
/// head when none receive HG.
pub fn quality_heads(partition: &HeadPartition) -> Vec<(usize, usize)> {
    if partition.hg.is_empty() {
        partition.tg.clone()
    } else {
        partition.hg.clone()
    }
}
