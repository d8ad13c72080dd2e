//! Training, evaluation and multi-seed experiments.
//!
//! Seeds run as independent jobs on a worker pool; each job is
//! single-threaded and deterministic, and results are gathered in seed order.

pub mod metrics;
pub mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GuidanceConfig};
use crate::error::{Result, SagError};
use crate::guidance::{build_hg, build_tg};
use crate::losses::LossBreakdown;
use crate::models::{Model, ModelKind, ModelParams};
use crate::synth::{Dataset, LabeledSlide};

pub use metrics::{classification_metrics, roc_auc, ClassMetrics};
pub use train::{attention_quality, evaluate, head_partition, train_seed, EpochRecord, LossPath, Objective, TrainRun};

/// Builds the enabled guidance kinds for every scale of every slide.
pub fn attach_guidance(slides: &mut [LabeledSlide], g: &GuidanceConfig) -> Result<()> {
    slides.par_iter_mut().try_for_each(|s| {
        for bag in &mut s.bags {
            bag.guidance.tg = if g.use_tg { Some(build_tg(&s.gray, &bag.grid, g.polarity)?) } else { None };
            bag.guidance.hg = if g.use_hg { Some(build_hg(&s.truth.cells, &bag.grid, g.hg_params())?) } else { None };
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
    pub attention_quality: f64,
    pub loss_trace: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
    pub attention_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Averaging convention of precision, recall and AUC.
    pub averaging: String,
    pub model: ModelKind,
    pub use_hg: bool,
    pub use_tg: bool,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    pub mean: MetricSummary,
}

impl MetricsReport {
    pub fn from_seeds(cfg: &ExperimentConfig, per_seed: Vec<SeedReport>) -> Self {
        let n = per_seed.len().max(1) as f64;
        let avg = |f: fn(&SeedReport) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
        let mean = MetricSummary {
            accuracy: avg(|r| r.accuracy),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            auc: avg(|r| r.auc),
            attention_quality: avg(|r| r.attention_quality),
        };
        Self {
            averaging: "macro".into(),
            model: cfg.model.kind,
            use_hg: cfg.guidance.use_hg,
            use_tg: cfg.guidance.use_tg,
            seeds: per_seed.iter().map(|r| r.seed).collect(),
            per_seed,
            mean,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub runs: Vec<TrainRun>,
}

impl ExperimentOutput {
    /// One JSON line per (seed, epoch), seeds in configured order.
    pub fn metrics_lines(&self) -> Result<String> {
        let mut out = String::new();
        for run in &self.runs {
            for e in &run.epochs {
                out.push_str(&serde_json::to_string(e)?);
                out.push('\n');
            }
        }
        Ok(out)
    }
}

pub(crate) fn with_workers<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SagError::InvalidArgument(format!("worker pool: {e}")))?;
    Ok(pool.install(job))
}

/// Scores trained parameters on the test split.
pub fn seed_report(cfg: &ExperimentConfig, model: &Model, params: &ModelParams, test: &[LabeledSlide], seed: u64, trace: Vec<LossBreakdown>) -> Result<SeedReport> {
    let objective = Objective::from_config(cfg, model)?;
    let ev = evaluate(model, params, test, &train::quality_heads(&objective.partition))?;
    Ok(SeedReport {
        seed,
        accuracy: ev.metrics.accuracy,
        precision: ev.metrics.precision,
        recall: ev.metrics.recall,
        auc: ev.metrics.auc,
        attention_quality: ev.attention_quality.unwrap_or(0.0),
        loss_trace: trace,
    })
}

/// Trains one model per configured seed and reports test metrics.
/// `ds` must already carry the guidance the config enables.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentOutput> {
    run_experiment_with(cfg, ds, LossPath::Sag)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, ds: &Dataset, path: LossPath) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let model = Model::new(cfg.arch())?;
    let mut objective = Objective::from_config(cfg, &model)?;
    objective.path = path;
    let results: Vec<Result<(TrainRun, SeedReport)>> = with_workers(cfg.workers, || {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let run = train_seed(&model, &objective, &cfg.optim, &ds.train, &ds.val, seed)?;
                let report = seed_report(cfg, &model, &run.params, &ds.test, seed, run.steps.clone())?;
                Ok((run, report))
            })
            .collect()
    })?;
    let mut runs = Vec::with_capacity(results.len());
    let mut per_seed = Vec::with_capacity(results.len());
    for r in results {
        let (run, rep) = r?;
        runs.push(run);
        per_seed.push(rep);
    }
    Ok(ExperimentOutput { report: MetricsReport::from_seeds(cfg, per_seed), runs })
}
