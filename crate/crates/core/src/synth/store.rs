//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/slides/<id>.raster.pgm    gray raster
//! <dir>/slides/<id>.tissue.pgm    truth tissue mask
//! <dir>/slides/<id>.lesion.pgm    truth lesion mask
//! <dir>/slides/<id>.points.csv    cell points, header x,y
//! <dir>/slides/<id>.s<k>.csv      features of scale k
//! <dir>/guidance/<id>.s<k>.<tg|hg>.json   optional guidance weights
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledSlide, SlideSpec, SlideTruth, Split, SplitSizes};
use crate::error::{Result, SagError};
use crate::grid::{BinaryMask, GrayImage};
use crate::guidance::{GuidanceKind, GuidanceWeights};
use crate::io::{decode_features, decode_points, encode_features, encode_points, read_json, write_atomic, write_json};
use crate::models::Bag;
use crate::pgm::Pgm;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "sag-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    pub id: String,
    pub split: Split,
    pub label: usize,
    pub seed: u64,
    pub raster: String,
    pub tissue: String,
    pub lesion: String,
    pub points: String,
    pub features: Vec<String>,
    pub distractors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub sizes: SplitSizes,
    pub spec: SlideSpec,
    pub slides: Vec<SlideEntry>,
}

impl Manifest {
    pub fn entry(&self, id: &str) -> Option<&SlideEntry> {
        self.slides.iter().find(|e| e.id == id)
    }
}

fn entry_for(slide: &LabeledSlide, split: Split) -> SlideEntry {
    let f = |suffix: &str| format!("slides/{}.{suffix}", slide.id);
    SlideEntry {
        id: slide.id.clone(),
        split,
        label: slide.label,
        seed: slide.seed,
        raster: f("raster.pgm"),
        tissue: f("tissue.pgm"),
        lesion: f("lesion.pgm"),
        points: f("points.csv"),
        features: (0..slide.bags.len()).map(|k| f(&format!("s{k}.csv"))).collect(),
        distractors: slide.truth.distractors.clone(),
    }
}

fn write_slide(dir: &Path, slide: &LabeledSlide, e: &SlideEntry) -> Result<()> {
    write_atomic(&dir.join(&e.raster), Pgm::from(&slide.gray).encode().as_bytes())?;
    write_atomic(&dir.join(&e.tissue), Pgm::from(&slide.truth.tissue).encode().as_bytes())?;
    write_atomic(&dir.join(&e.lesion), Pgm::from(&slide.truth.lesion).encode().as_bytes())?;
    write_atomic(&dir.join(&e.points), &encode_points(&slide.truth.cells)?)?;
    for (bag, path) in slide.bags.iter().zip(&e.features) {
        write_atomic(&dir.join(path), &encode_features(&bag.features)?)?;
    }
    Ok(())
}

/// Writes every slide, then the manifest.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("slides"))?;
    let mut slides = Vec::new();
    for split in Split::ALL {
        slides.extend(ds.split(split).iter().map(|s| (s, entry_for(s, split))));
    }
    slides.par_iter().try_for_each(|(s, e)| write_slide(dir, s, e))?;
    let manifest = Manifest {
        format: FORMAT.to_string(),
        seed: ds.seed,
        sizes: SplitSizes { n_train: ds.train.len(), n_val: ds.val.len(), n_test: ds.test.len() },
        spec: ds.spec.clone(),
        slides: slides.into_iter().map(|(_, e)| e).collect(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join(MANIFEST))?;
    if m.format != FORMAT {
        return Err(SagError::Parse(format!("unsupported dataset format {:?}", m.format)));
    }
    Ok(m)
}

fn read_pgm(path: PathBuf) -> Result<Pgm> {
    Pgm::read(&path)
}

pub fn load_slide(dir: &Path, spec: &SlideSpec, e: &SlideEntry) -> Result<LabeledSlide> {
    let gray = GrayImage::try_from(read_pgm(dir.join(&e.raster))?)?;
    let tissue = BinaryMask::try_from(read_pgm(dir.join(&e.tissue))?)?;
    let lesion = BinaryMask::try_from(read_pgm(dir.join(&e.lesion))?)?;
    let cells = decode_points(&std::fs::read(dir.join(&e.points))?)?;
    if e.features.len() != spec.scales {
        return Err(SagError::shape(format!("{} feature files", spec.scales), e.features.len()));
    }
    let bags = e
        .features
        .iter()
        .enumerate()
        .map(|(s, path)| Bag::new(decode_features(&std::fs::read(dir.join(path))?)?, e.label, spec.scale_grid(s), s))
        .collect::<Result<Vec<_>>>()?;
    spec.grid.check_raster(gray.height(), gray.width())?;
    Ok(LabeledSlide {
        id: e.id.clone(),
        seed: e.seed,
        label: e.label,
        gray,
        truth: SlideTruth { tissue, lesion, cells, distractors: e.distractors.clone() },
        bags,
    })
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    let m = read_manifest(dir)?;
    let slides = m
        .slides
        .par_iter()
        .map(|e| load_slide(dir, &m.spec, e).map(|s| (e.split, s)))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset { spec: m.spec.clone(), seed: m.seed, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (split, s) in slides {
        ds.split_mut(split).push(s);
    }
    Ok((m, ds))
}

pub const GUIDANCE_DIR: &str = "guidance";

pub fn guidance_path(dir: &Path, id: &str, scale: usize, kind: GuidanceKind) -> PathBuf {
    dir.join(GUIDANCE_DIR).join(format!("{id}.s{scale}.{}.json", kind.tag()))
}

/// Writes whichever guidance kinds each bag carries.
pub fn write_guidance(dir: &Path, slides: &[LabeledSlide]) -> Result<usize> {
    let written: Vec<usize> = slides
        .par_iter()
        .map(|s| {
            let mut n = 0;
            for (k, bag) in s.bags.iter().enumerate() {
                for w in [&bag.guidance.tg, &bag.guidance.hg].into_iter().flatten() {
                    write_json(&guidance_path(dir, &s.id, k, w.kind), w)?;
                    n += 1;
                }
            }
            Ok(n)
        })
        .collect::<Result<_>>()?;
    Ok(written.iter().sum())
}

/// Reads one guidance file if it exists, checking kind and grid against
/// the bag it will be attached to.
pub fn read_guidance(dir: &Path, slide: &LabeledSlide, scale: usize, kind: GuidanceKind) -> Result<Option<GuidanceWeights>> {
    let path = guidance_path(dir, &slide.id, scale, kind);
    if !path.exists() {
        return Ok(None);
    }
    let w: GuidanceWeights = read_json(&path)?;
    w.validate()?;
    let grid = slide.bags.get(scale).map(|b| b.grid).ok_or(SagError::Bounds { index: scale, len: slide.bags.len() })?;
    if w.kind != kind || w.grid != grid {
        return Err(SagError::Alignment(format!("{} does not match {kind:?} guidance on {grid:?}", path.display())));
    }
    Ok(Some(w))
}
