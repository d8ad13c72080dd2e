//! Experiment configuration and `key=value` overrides.
//!
//! Overrides address a field by any dotted suffix of its path that is unique
//! in the tree: `optim.lr=0.05`, `lesion.delta=0.5`, `n_train=89`.
//! Values are parsed as JSON and fall back to a plain string.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, SagError};
use crate::guidance::{HgParams, TissuePolarity};
use crate::losses::SagLossOptions;
use crate::models::{ArchConfig, ModelKind, SupervisedLayers};
use crate::synth::{SlideSpec, SplitSizes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub spec: SlideSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        let sizes = SplitSizes::default();
        Self { seed: 0, n_train: sizes.n_train, n_val: sizes.n_val, n_test: sizes.n_test, spec: SlideSpec::default() }
    }
}

impl DataConfig {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes { n_train: self.n_train, n_val: self.n_val, n_test: self.n_test }
    }
}

/// Backbone hyperparameters; input width, class count and scale count come
/// from the data spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub heads: usize,
    pub d_k: usize,
    pub ff_dim: usize,
    pub mil_hidden: usize,
    pub pe_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = ArchConfig::default();
        Self {
            kind: a.kind,
            layers: a.layers,
            heads: a.heads,
            d_k: a.d_k,
            ff_dim: a.ff_dim,
            mil_hidden: a.mil_hidden,
            pe_scale: a.pe_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub use_hg: bool,
    pub use_tg: bool,
    pub hg_head_fraction: f64,
    pub supervised_layers: SupervisedLayers,
    pub eps: f64,
    pub min_samples: usize,
    pub polarity: TissuePolarity,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        let hg = HgParams::default();
        Self {
            use_hg: false,
            use_tg: false,
            hg_head_fraction: 0.5,
            supervised_layers: SupervisedLayers::All,
            eps: hg.eps,
            min_samples: hg.min_samples,
            polarity: TissuePolarity::Darker,
        }
    }
}

impl GuidanceConfig {
    pub fn hg_params(&self) -> HgParams {
        HgParams { eps: self.eps, min_samples: self.min_samples }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Step size; `null` picks the backbone default, see [`OptimConfig::step_size`].
    pub lr: Option<f64>,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `null` disables clipping.
    pub clip_norm: Option<f64>,
    /// Task log-variances are projected onto `[min, max]` after each step.
    pub log_var_bounds: (f64, f64),
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: None, momentum: 0.9, epochs: 20, batch_size: 10, clip_norm: Some(5.0), log_var_bounds: (-4.0, 4.0) }
    }
}

impl OptimConfig {
    /// The configured step size, else 0.1 for the transformer and 0.05 for
    /// MIL.
    pub fn step_size(&self, kind: ModelKind) -> f64 {
        self.lr.unwrap_or(match kind {
            ModelKind::Transformer => 0.1,
            ModelKind::Mil => 0.05,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub guidance: GuidanceConfig,
    pub loss: SagLossOptions,
    pub optim: OptimConfig,
    pub seeds: Vec<u64>,
    /// Worker threads for per-seed and per-slide jobs; 0 picks the core count.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            guidance: GuidanceConfig::default(),
            loss: SagLossOptions::default(),
            optim: OptimConfig::default(),
            seeds: vec![0],
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn arch(&self) -> ArchConfig {
        let m = &self.model;
        ArchConfig {
            kind: m.kind,
            feature_dim: self.data.spec.feature_dim,
            num_classes: self.data.spec.num_classes,
            num_scales: self.data.spec.scales,
            layers: m.layers,
            heads: m.heads,
            d_k: m.d_k,
            ff_dim: m.ff_dim,
            mil_hidden: m.mil_hidden,
            pe_scale: m.pe_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        self.arch().validate()?;
        let o = &self.optim;
        if matches!(o.lr, Some(lr) if !(lr > 0.0 && lr.is_finite())) || !(0.0..1.0).contains(&o.momentum) {
            return Err(SagError::InvalidArgument("optim.lr must be positive and optim.momentum in [0, 1)".into()));
        }
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(SagError::InvalidArgument("optim.batch_size and optim.epochs must be positive".into()));
        }
        if matches!(o.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(SagError::InvalidArgument("optim.clip_norm must be positive or null".into()));
        }
        let (lo, hi) = o.log_var_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo <= 0.0 && 0.0 <= hi) {
            return Err(SagError::InvalidArgument("optim.log_var_bounds must be finite and bracket 0".into()));
        }
        if !(0.0..=1.0).contains(&self.guidance.hg_head_fraction) {
            return Err(SagError::InvalidArgument("guidance.hg_head_fraction outside [0, 1]".into()));
        }
        if self.seeds.is_empty() {
            return Err(SagError::InvalidArgument("at least one seed".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(SagError::InvalidArgument("seeds must be distinct".into()));
        }
        Ok(())
    }

    /// Applies overrides in order and re-validates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut tree, o.as_ref())?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| SagError::Parse(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn leaf_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            out.push(prefix.clone());
            leaf_paths(child, prefix, out);
            prefix.pop();
        }
    }
}

fn resolve_key(tree: &Value, key: &str) -> Result<Vec<String>> {
    let mut all = Vec::new();
    leaf_paths(tree, &mut Vec::new(), &mut all);
    let wanted: Vec<String> = key.split('.').map(str::to_string).collect();
    let hits: Vec<Vec<String>> = all.into_iter().filter(|p| p.ends_with(&wanted)).collect();
    match hits.len() {
        0 => Err(SagError::InvalidArgument(format!("unknown config key {key:?}"))),
        1 => Ok(hits.into_iter().next().expect("one hit")),
        _ => Err(SagError::InvalidArgument(format!(
            "ambiguous config key {key:?}: {}",
            hits.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| SagError::InvalidArgument(format!("override {assignment:?} is not key=value")))?;
    let path = resolve_key(tree, key.trim())?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    for part in &path {
        node = node.get_mut(part).expect("resolved path exists");
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn leaf_and_dotted_overrides() {
        let c = ExperimentConfig::default()
            .with_overrides(&["n_train=89", "n_val=22", "n_test=111", "optim.lr=0.1", "kind=mil", "use_hg=true"])
            .unwrap();
        assert_eq!(c.data.sizes(), SplitSizes { n_train: 89, n_val: 22, n_test: 111 });
        assert_eq!(c.optim.step_size(c.model.kind), 0.1);
        assert_eq!(ExperimentConfig::default().optim.step_size(ModelKind::Mil), 0.05);
        assert_eq!(c.model.kind, ModelKind::Mil);
        assert!(c.guidance.use_hg);
        let s = ExperimentConfig::default().with_overrides(&["seeds=[1,2,3]", "clip_norm=null"]).unwrap();
        assert_eq!(s.seeds, vec![1, 2, 3]);
        assert_eq!(s.optim.clip_norm, None);
    }

    #[test]
    fn unknown_and_ambiguous_keys_rejected() {
        let base = ExperimentConfig::default();
        assert!(base.with_overrides(&["no_such_key=1"]).is_err());
        assert!(base.with_overrides(&["optim.nope=1"]).is_err());
        // delta exists under both lesion and distractor
        let err = base.with_overrides(&["delta=0.5"]).unwrap_err().to_string();
        assert!(err.contains("ambiguous"), "{err}");
        let c = base.with_overrides(&["lesion.delta=0.5"]).unwrap();
        assert_eq!(c.data.spec.lesion.delta, 0.5);
        assert!(base.with_overrides(&["n_train"]).is_err());
        assert!(base.with_overrides(&["seeds=[1,1]"]).is_err());
    }

    #[test]
    fn unknown_fields_in_file_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"optim": {"lr": 0.1, "bogus": 1}}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"optim": {"lr": 0.2}}"#).unwrap();
        assert_eq!(c.optim.lr, Some(0.2));
        assert_eq!(c.optim.epochs, OptimConfig::default().epochs);
    }
}
