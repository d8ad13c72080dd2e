//! Attention backbones whose patch attention can be supervised.
//!
//! Both backbones pool patch representations with an attention distribution
//! over patches and classify the pooled vector linearly. The transformer pools
//! its last layer's values with each head's column-mean attention; the MIL
//! model pools raw features with a gated tanh scorer's softmax.

pub mod attention;
pub mod checkpoint;
pub mod features;
pub mod mil;
pub mod params;
pub mod transformer;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SagError};
use crate::grid::PatchGrid;
use crate::guidance::GuidanceWeights;

pub use attention::transformer_attention;
pub use features::{DescriptorSource, FeatureSource, SlideRaster};
pub use params::{Layout, ModelParams, TASK_CLS, TASK_INOUT, TASK_MSE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transformer,
    Mil,
}

/// Which transformer layers have their attention supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedLayers {
    #[default]
    All,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_scales: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_k: usize,
    pub ff_dim: usize,
    pub mil_hidden: usize,
    /// Multiplier on the sinusoidal positional encoding.
    pub pe_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Transformer,
            feature_dim: 16,
            num_classes: 4,
            num_scales: 1,
            layers: 1,
            heads: 8,
            d_k: 4,
            ff_dim: 16,
            mil_hidden: 8,
            pe_scale: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("num_classes", self.num_classes),
            ("num_scales", self.num_scales),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("ff_dim", self.ff_dim),
            ("mil_hidden", self.mil_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SagError::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(SagError::InvalidArgument("need at least two classes".into()));
        }
        if !self.pe_scale.is_finite() {
            return Err(SagError::NonFinite("pe_scale"));
        }
        Ok(())
    }

    /// Attention vectors produced per scale: `layers * heads` for the
    /// transformer, one for MIL.
    pub fn attention_shape(&self) -> (usize, usize) {
        match self.kind {
            ModelKind::Transformer => (self.layers, self.heads),
            ModelKind::Mil => (1, 1),
        }
    }
}

/// Optional per-bag attention targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BagGuidance {
    pub tg: Option<GuidanceWeights>,
    pub hg: Option<GuidanceWeights>,
}

/// `p x e` patch features of one slide at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub features: Array2<f64>,
    pub label: usize,
    pub grid: PatchGrid,
    pub guidance: BagGuidance,
    pub scale_id: usize,
}

impl Bag {
    pub fn new(features: Array2<f64>, label: usize, grid: PatchGrid, scale_id: usize) -> Result<Self> {
        if features.nrows() != grid.len() {
            return Err(SagError::shape(format!("{} feature rows", grid.len()), features.nrows()));
        }
        Ok(Self { features, label, grid, guidance: BagGuidance::default(), scale_id })
    }

    pub fn num_patches(&self) -> usize {
        self.features.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttentionKey {
    pub scale: usize,
    pub layer: usize,
    pub head: usize,
}

impl AttentionKey {
    pub fn new(scale: usize, layer: usize, head: usize) -> Self {
        Self { scale, layer, head }
    }
}

/// Attention distributions over patches, keyed by `(scale, layer, head)`.
/// MIL models report a single `(scale, 0, 0)` entry per scale.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionRecord {
    pub entries: BTreeMap<AttentionKey, Vec<f64>>,
}

impl AttentionRecord {
    pub fn get(&self, key: AttentionKey) -> Option<&[f64]> {
        self.entries.get(&key).map(Vec::as_slice)
    }

    pub fn scales(&self) -> usize {
        self.entries.keys().map(|k| k.scale + 1).max().unwrap_or(0)
    }
}

/// Gradient of an objective w.r.t. attention vectors, same keys as
/// [`AttentionRecord`]. Missing keys mean zero.
pub type AttentionGrads = BTreeMap<AttentionKey, Vec<f64>>;

/// Which `(layer, head)` pairs receive each kind of guidance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadPartition {
    pub hg: Vec<(usize, usize)>,
    pub tg: Vec<(usize, usize)>,
}

impl HeadPartition {
    pub fn hg_heads_in_layer(&self, layer: usize) -> Vec<usize> {
        self.hg.iter().filter(|(l, _)| *l == layer).map(|&(_, h)| h).collect()
    }
}

/// Heads `[0, floor(heads * hg_fraction))` of each supervised layer get HG;
/// every head of a supervised layer gets TG.
pub fn select_supervised_heads(
    layers: usize,
    heads: usize,
    hg_fraction: f64,
    which: SupervisedLayers,
) -> Result<HeadPartition> {
    if !(0.0..=1.0).contains(&hg_fraction) {
        return Err(SagError::InvalidArgument(format!("hg_head_fraction {hg_fraction} outside [0, 1]")));
    }
    let n_hg = (heads as f64 * hg_fraction).floor() as usize;
    let layer_range = match which {
        SupervisedLayers::All => 0..layers,
        SupervisedLayers::Last => layers.saturating_sub(1)..layers,
    };
    let mut part = HeadPartition { hg: Vec::new(), tg: Vec::new() };
    for l in layer_range {
        part.hg.extend((0..n_hg).map(|h| (l, h)));
        part.tg.extend((0..heads).map(|h| (l, h)));
    }
    Ok(part)
}

/// Output of a forward pass plus whatever the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Array1<f64>,
    pub attention: AttentionRecord,
    pooled: Array1<f64>,
    cache: Cache,
}

#[derive(Debug, Clone)]
enum Cache {
    Transformer(Vec<transformer::ScaleCache>),
    Mil(Vec<mil::ScaleCache>),
}

/// A backbone bound to its architecture and parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub layout: Layout,
}

impl Model {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        Ok(Self { arch, layout })
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        ModelParams::init(&self.layout, seed)
    }

    fn check_bags(&self, params: &ModelParams, bags: &[Bag]) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(SagError::shape(format!("{} parameters", self.layout.total), params.len()));
        }
        if bags.len() != self.arch.num_scales {
            return Err(SagError::shape(format!("{} scale bags", self.arch.num_scales), bags.len()));
        }
        for (s, bag) in bags.iter().enumerate() {
            if bag.features.ncols() != self.arch.feature_dim || bag.features.nrows() != bag.grid.len() {
                return Err(SagError::shape(
                    format!("{}x{} features at scale {s}", bag.grid.len(), self.arch.feature_dim),
                    format!("{}x{}", bag.features.nrows(), bag.features.ncols()),
                ));
            }
            if bag.features.iter().any(|v| !v.is_finite()) {
                return Err(SagError::NonFinite("bag features"));
            }
        }
        Ok(())
    }

    /// Class logits and attention for one slide, given one bag per scale.
    pub fn forward(&self, params: &ModelParams, bags: &[Bag]) -> Result<Forward> {
        self.check_bags(params, bags)?;
        let encodings: Vec<Array2<f64>> = bags
            .iter()
            .map(|b| features::positional_encoding(&b.grid, self.arch.feature_dim))
            .collect();
        self.forward_with_encodings(params, bags, &encodings)
    }

    /// Like [`Model::forward`] with caller-supplied positional encodings
    /// (ignored by the MIL backbone).
    pub fn forward_with_encodings(
        &self,
        params: &ModelParams,
        bags: &[Bag],
        encodings: &[Array2<f64>],
    ) -> Result<Forward> {
        self.check_bags(params, bags)?;
        let data = params.as_flat();
        let mut attention = AttentionRecord::default();
        let mut pooled = Vec::with_capacity(self.layout.pooled_dim());
        let cache = match self.arch.kind {
            ModelKind::Transformer => {
                let mut caches = Vec::with_capacity(bags.len());
                for (s, bag) in bags.iter().enumerate() {
                    let enc = encodings.get(s).ok_or_else(|| SagError::shape(bags.len(), encodings.len()))?;
                    if enc.dim() != bag.features.dim() {
                        return Err(SagError::shape(format!("{:?}", bag.features.dim()), format!("{:?}", enc.dim())));
                    }
                    let c = transformer::forward_scale(&self.layout.scales[s], data, &bag.features, enc, self.arch.pe_scale);
                    c.record(s, &mut attention);
                    pooled.extend(c.pooled.iter());
                    caches.push(c);
                }
                Cache::Transformer(caches)
            }
            ModelKind::Mil => {
                let mut caches = Vec::with_capacity(bags.len());
                for (s, bag) in bags.iter().enumerate() {
                    let c = mil::forward_scale(&self.layout.scales[s], data, &bag.features);
                    attention.entries.insert(AttentionKey::new(s, 0, 0), c.attention.to_vec());
                    pooled.extend(c.pooled.iter());
                    caches.push(c);
                }
                Cache::Mil(caches)
            }
        };
        let pooled = Array1::from(pooled);
        let logits = pooled.dot(&self.layout.wc.mat(data)) + self.layout.bc.vec(data);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(SagError::NonFinite("logits"));
        }
        Ok(Forward { logits, attention, pooled, cache })
    }

    /// Accumulates parameter gradients into `grads` given upstream gradients
    /// on the logits and on the attention vectors. Log-variance slots are
    /// left untouched.
    pub fn backward(
        &self,
        params: &ModelParams,
        bags: &[Bag],
        fwd: &Forward,
        d_logits: ArrayView1<f64>,
        d_attention: &AttentionGrads,
        grads: &mut [f64],
    ) {
        let data = params.as_flat();
        let wc = self.layout.wc;
        {
            let mut g_wc = wc.mat_mut(grads);
            for (i, &z) in fwd.pooled.iter().enumerate() {
                for (j, &d) in d_logits.iter().enumerate() {
                    g_wc[[i, j]] += z * d;
                }
            }
        }
        self.layout.bc.vec_mut(grads).scaled_add(1.0, &d_logits);
        let d_pooled = wc.mat(data).dot(&d_logits);
        let mut offset = 0;
        match &fwd.cache {
            Cache::Transformer(caches) => {
                for (s, c) in caches.iter().enumerate() {
                    let width = c.pooled.len();
                    let dz = d_pooled.slice(ndarray::s![offset..offset + width]);
                    transformer::backward_scale(&self.layout.scales[s], data, c, s, dz, d_attention, grads);
                    offset += width;
                }
            }
            Cache::Mil(caches) => {
                for (s, c) in caches.iter().enumerate() {
                    let width = c.pooled.len();
                    let dz = d_pooled.slice(ndarray::s![offset..offset + width]);
                    let da = d_attention.get(&AttentionKey::new(s, 0, 0)).map(Vec::as_slice);
                    mil::backward_scale(&self.layout.scales[s], data, &bags[s].features, c, dz, da, grads);
                    offset += width;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_partition_examples() {
        let p = select_supervised_heads(2, 8, 0.5, SupervisedLayers::All).unwrap();
        assert_eq!(p.hg_heads_in_layer(0), vec![0, 1, 2, 3]);
        assert_eq!(p.hg_heads_in_layer(1), vec![0, 1, 2, 3]);
        assert_eq!(p.tg.len(), 16);
        assert!(select_supervised_heads(1, 8, 0.0, SupervisedLayers::All).unwrap().hg.is_empty());
        assert_eq!(select_supervised_heads(1, 8, 1.0, SupervisedLayers::All).unwrap().hg.len(), 8);
        let last = select_supervised_heads(3, 4, 0.5, SupervisedLayers::Last).unwrap();
        assert_eq!(last.hg, vec![(2, 0), (2, 1)]);
        assert!(select_supervised_heads(1, 8, 1.5, SupervisedLayers::All).is_err());
    }

    #[test]
    fn bag_rows_must_match_grid() {
        let grid = PatchGrid::new(2, 2, 4).unwrap();
        assert!(Bag::new(Array2::zeros((3, 5)), 0, grid, 0).is_err());
    }

    #[test]
    fn parameter_count_depends_only_on_architecture() {
        let arch = ArchConfig { layers: 2, ..ArchConfig::default() };
        let a = Model::new(arch.clone()).unwrap();
        let b = Model::new(arch).unwrap();
        assert_eq!(a.layout.total, b.layout.total);
        // 2 layers x 8 heads x 3 projections x (16x4 + 4), one mixing block,
        // 32x4 classifier + bias, 3 log-variances.
        let mix = 32 * 16 + 16 * 16 + 16 + 16 * 16 + 16;
        assert_eq!(a.layout.total, 2 * 8 * 3 * 68 + mix + 32 * 4 + 4 + 3);
        let p = a.init_params(3);
        let back = ModelParams::from_flat(&a.layout, p.as_flat().to_vec()).unwrap();
        assert_eq!(back, p);
        assert!(ModelParams::from_flat(&a.layout, vec![0.0; 3]).is_err());
    }
}
