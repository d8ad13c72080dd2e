//! Command-line surface of the `sag` binary.
//!
//! Every command resolves an [`ExperimentConfig`] from `--config`, then
//! `--override` assignments, then `--seed` and `--workers`, and writes the
//! result as `config.resolved.json` next to its outputs. Outputs live under
//! one root (`--out`, or `$SAG_OUT`):
//!
//! ```text
//! <root>/data/                      gen-data; build-guidance adds data/guidance/
//! <root>/train/                     metrics.jsonl, report.json, checkpoints/seed-<n>.ckpt
//! <root>/eval/                      report.json
//! <root>/render/                    <id>.attention.pgm, <id>.guidance.pgm, <id>.side.pgm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{ExperimentConfig, GuidanceConfig};
use crate::error::{Result, SagError};
use crate::guidance::GuidanceKind;
use crate::harness::{self, attach_guidance, run_experiment, seed_report, MetricsReport};
use crate::io::{write_atomic, write_json};
use crate::models::checkpoint::Checkpoint;
use crate::models::Model;
use crate::render::{heatmap, side_by_side};
use crate::synth::store::{load_dataset, read_guidance, write_dataset, write_guidance, GUIDANCE_DIR, MANIFEST};
use crate::synth::{generate_dataset, Dataset, LabeledSlide, Split};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug, Parser)]
#[command(name = "sag", version, about = "Attention guidance for weakly supervised slide classification")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset seed for gen-data, the single training seed for train.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// `key=value` config overrides, applied in order.
    #[arg(long = "override", global = true, num_args = 1.., value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root.
    #[arg(long, global = true, env = "SAG_OUT", default_value = "sag-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceChoice {
    Tg,
    Hg,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData,
    /// Write guidance weights for every slide of a dataset.
    BuildGuidance {
        #[arg(long, value_enum, default_value = "both")]
        kind: GuidanceChoice,
        /// Dataset directory [default: <root>/data]
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model per configured seed.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Export attention and guidance heatmaps for one slide.
    RenderAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        slide: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scale: usize,
    },
}

impl Common {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str(&text).map_err(|e| SagError::Parse(format!("{}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn data_dir(&self, data: &Option<PathBuf>) -> PathBuf {
        data.clone().unwrap_or_else(|| self.out.join("data"))
    }
}

/// Refuses a non-empty directory unless `force`; with `force`, removes the
/// listed children (or the whole directory when `owned` is empty) so no
/// stale files survive.
fn prepare_dir(dir: &Path, force: bool, owned: &[&str]) -> Result<()> {
    let occupied = dir.read_dir().map(|mut it| it.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(SagError::InvalidArgument(format!("{} is not empty; pass --force to replace it", dir.display())));
        }
        if owned.is_empty() {
            fs::remove_dir_all(dir)?;
        }
        for name in owned {
            let p = dir.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.exists() {
                fs::remove_file(&p)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn use_pool<T: Send>(workers: usize, job: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    harness::with_workers(workers, job)?
}

pub fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::GenData => gen_data(c),
        Command::BuildGuidance { kind, data } => build_guidance(c, &c.data_dir(data), *kind),
        Command::Train { data } => train(c, &c.data_dir(data)),
        Command::Eval { checkpoint, data, split } => eval(c, checkpoint, &c.data_dir(data), *split),
        Command::RenderAttention { checkpoint, slide, data, scale } => render(c, checkpoint, &c.data_dir(data), slide, *scale),
    }
}

fn gen_data(c: &Common) -> Result<()> {
    let mut cfg = c.resolve()?;
    if let Some(s) = c.seed {
        cfg.data.seed = s;
    }
    let dir = c.out.join("data");
    prepare_dir(&dir, c.force, &["slides", GUIDANCE_DIR, MANIFEST, RESOLVED_CONFIG])?;
    let ds = use_pool(cfg.workers, || generate_dataset(&cfg.data.spec, cfg.data.sizes(), cfg.data.seed))?;
    let m = use_pool(cfg.workers, || write_dataset(&dir, &ds))?;
    write_json(&dir.join(RESOLVED_CONFIG), &cfg)?;
    println!("wrote {} slides to {}", m.slides.len(), dir.display());
    Ok(())
}

/// Loads a dataset and makes the config's data section describe it.
fn open_dataset(cfg: &mut ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let (m, ds) = load_dataset(dir)?;
    if cfg.data.spec != m.spec {
        log::warn!("config slide spec differs from {}; using the dataset's", dir.display());
    }
    cfg.data.seed = m.seed;
    cfg.data.spec = m.spec;
    (cfg.data.n_train, cfg.data.n_val, cfg.data.n_test) = (m.sizes.n_train, m.sizes.n_val, m.sizes.n_test);
    Ok(ds)
}

fn build_guidance(c: &Common, dir: &Path, kind: GuidanceChoice) -> Result<()> {
    let mut cfg = c.resolve()?;
    let mut ds = open_dataset(&mut cfg, dir)?;
    let out = dir.join(GUIDANCE_DIR);
    prepare_dir(&out, c.force, &[])?;
    let g = GuidanceConfig {
        use_tg: kind != GuidanceChoice::Hg,
        use_hg: kind != GuidanceChoice::Tg,
        ..cfg.guidance.clone()
    };
    let mut written = 0;
    for split in Split::ALL {
        let slides = ds.split_mut(split);
        use_pool(cfg.workers, || attach_guidance(slides, &g))?;
        written += use_pool(cfg.workers, || write_guidance(dir, slides))?;
    }
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
    println!("wrote {written} guidance files to {}", out.display());
    Ok(())
}

/// Attaches the guidance the config enables, from files when present.
fn guidance_for(cfg: &ExperimentConfig, dir: &Path, slides: &mut [LabeledSlide]) -> Result<()> {
    let mut missing = Vec::new();
    for (i, s) in slides.iter_mut().enumerate() {
        for k in 0..s.bags.len() {
            let tg = if cfg.guidance.use_tg { read_guidance(dir, s, k, GuidanceKind::Tissue)? } else { None };
            let hg = if cfg.guidance.use_hg { read_guidance(dir, s, k, GuidanceKind::Heuristic)? } else { None };
            if (cfg.guidance.use_tg && tg.is_none()) || (cfg.guidance.use_hg && hg.is_none()) {
                missing.push(i);
            }
            s.bags[k].guidance.tg = tg;
            s.bags[k].guidance.hg = hg;
        }
    }
    missing.dedup();
    if !missing.is_empty() {
        log::info!("computing guidance for {} slides without guidance files", missing.len());
        let mut todo: Vec<LabeledSlide> = missing.iter().map(|&i| slides[i].clone()).collect();
        use_pool(cfg.workers, || attach_guidance(&mut todo, &cfg.guidance))?;
        for (i, s) in missing.into_iter().zip(todo) {
            slides[i] = s;
        }
    }
    Ok(())
}

fn train(c: &Common, data: &Path) -> Result<()> {
    let mut cfg = c.resolve()?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    let mut ds = open_dataset(&mut cfg, data)?;
    for split in [Split::Train, Split::Val] {
        guidance_for(&cfg, data, ds.split_mut(split))?;
    }
    let dir = c.out.join("train");
    prepare_dir(&dir, c.force, &["checkpoints", "metrics.jsonl", "report.json", RESOLVED_CONFIG])?;
    write_json(&dir.join(RESOLVED_CONFIG), &cfg)?;
    let out = run_experiment(&cfg, &ds)?;
    write_atomic(&dir.join("metrics.jsonl"), out.metrics_lines()?.as_bytes())?;
    write_json(&dir.join("report.json"), &out.report)?;
    for run in &out.runs {
        let ck = Checkpoint { arch: cfg.arch(), params: run.params.clone(), meta: json!({"config": cfg, "seed": run.seed}) };
        ck.write(&dir.join("checkpoints").join(format!("seed-{}.ckpt", run.seed)))?;
    }
    let m = out.report.mean;
    println!(
        "{} seeds: acc {:.4} precision {:.4} recall {:.4} auc {:.4} attention {:.4}",
        out.runs.len(),
        m.accuracy,
        m.precision,
        m.recall,
        m.auc,
        m.attention_quality
    );
    Ok(())
}

/// Checkpoint plus the training config stored in its metadata.
fn open_checkpoint(path: &Path) -> Result<(Checkpoint, ExperimentConfig, u64)> {
    let ck = Checkpoint::read(path)?;
    let cfg: ExperimentConfig = serde_json::from_value(ck.meta.get("config").cloned().unwrap_or_default())
        .map_err(|e| SagError::Checkpoint(format!("{}: no usable training config: {e}", path.display())))?;
    if cfg.arch() != ck.arch {
        return Err(SagError::Checkpoint(format!("{}: stored config disagrees with architecture", path.display())));
    }
    let seed = ck.meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
    Ok((ck, cfg, seed))
}

fn eval(c: &Common, checkpoint: &Path, data: &Path, split: Split) -> Result<()> {
    let (ck, mut cfg, seed) = open_checkpoint(checkpoint)?;
    let ds = open_dataset(&mut cfg, data)?;
    if cfg.arch() != ck.arch {
        return Err(SagError::Checkpoint("dataset does not fit the checkpoint's architecture".into()));
    }
    let model = Model::new(ck.arch.clone())?;
    let rep = seed_report(&cfg, &model, &ck.params, ds.split(split), seed, Vec::new())?;
    let report = MetricsReport::from_seeds(&cfg, vec![rep]);
    let dir = c.out.join("eval");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join(RESOLVED_CONFIG), &cfg)?;
    write_json(&dir.join("report.json"), &report)?;
    let m = report.mean;
    println!(
        "{} {}: acc {:.4} precision {:.4} recall {:.4} auc {:.4} attention {:.4}",
        checkpoint.display(),
        split.name(),
        m.accuracy,
        m.precision,
        m.recall,
        m.auc,
        m.attention_quality
    );
    Ok(())
}

fn render(c: &Common, checkpoint: &Path, data: &Path, id: &str, scale: usize) -> Result<()> {
    let (ck, mut cfg, _) = open_checkpoint(checkpoint)?;
    let ds = open_dataset(&mut cfg, data)?;
    let mut slide = Split::ALL
        .iter()
        .flat_map(|&s| ds.split(s))
        .find(|s| s.id == id)
        .cloned()
        .ok_or_else(|| SagError::InvalidArgument(format!("no slide {id:?} in {}", data.display())))?;
    if scale >= slide.bags.len() {
        return Err(SagError::Bounds { index: scale, len: slide.bags.len() });
    }
    let model = Model::new(ck.arch.clone())?;
    let fwd = model.forward(&ck.params, &slide.bags)?;
    let partition = harness::head_partition(&model, cfg.guidance.hg_head_fraction, cfg.guidance.supervised_layers)?;
    let heads = harness::train::quality_heads(&partition);
    let grid = slide.bags[scale].grid;
    let mut att = vec![0.0; grid.len()];
    for &(l, h) in &heads {
        let ma = fwd
            .attention
            .get(crate::models::AttentionKey::new(scale, l, h))
            .ok_or_else(|| SagError::Alignment(format!("no attention for layer {l} head {h}")))?;
        att.iter_mut().zip(ma).for_each(|(a, m)| *a += m / heads.len() as f64);
    }
    // HG if available, otherwise TG.
    let g = GuidanceConfig { use_hg: true, use_tg: true, ..cfg.guidance.clone() };
    let hg = read_guidance(data, &slide, scale, GuidanceKind::Heuristic)?;
    let guidance = match hg {
        Some(w) => w,
        None => {
            attach_guidance(std::slice::from_mut(&mut slide), &g)?;
            slide.bags[scale].guidance.hg.clone().expect("hg attached")
        }
    };
    let dir = c.out.join("render");
    let att_map = heatmap(&att, &grid)?;
    let guide_map = heatmap(&guidance.weights, &grid)?;
    let joined = side_by_side(&[&att_map, &guide_map], grid.patch_edge / 4)?;
    let files = [("attention", &att_map), ("guidance", &guide_map), ("side", &joined)];
    for (tag, im) in files {
        im.write(&dir.join(format!("{id}.{tag}.pgm")))?;
    }
    write_json(&dir.join(RESOLVED_CONFIG), &cfg)?;
    println!("wrote {}/{id}.{{attention,guidance,side}}.pgm", dir.display());
    Ok(())
}

/// Process exit status for an error: 3 for divergence, 1 otherwise.
pub fn exit_code(e: &SagError) -> i32 {
    match e {
        SagError::Diverged { .. } => 3,
        _ => 1,
    }
}
