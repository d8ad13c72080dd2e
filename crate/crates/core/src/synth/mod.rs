//! Synthetic slides with planted ground truth.
//!
//! A slide is a union of tissue discs on a light background. Lesions are
//! patch-aligned rectangles fully inside tissue; they are darker and
//! carry `delta` in the signal plane of the slide's class. Distractors are
//! background patches carrying a larger signal of a random class, so a model
//! that attends by signal strength alone is misled. Cell points fall densely
//! inside lesions and sparsely over the remaining tissue.
//!
//! All randomness comes from ChaCha streams keyed by the slide seed.

pub mod store;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SagError};
use crate::grid::{BinaryMask, GrayImage, PatchGrid};
use crate::guidance::PointSet;
use crate::models::{Bag, DescriptorSource, FeatureSource, SlideRaster};

const STREAM_TISSUE: u64 = 1;
const STREAM_LESION: u64 = 2;
const STREAM_DISTRACTOR: u64 = 3;
const STREAM_CELLS: u64 = 4;
const STREAM_PIXELS: u64 = 5;
const STREAM_FEATURES: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueParams {
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Disc radii in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    pub gray: u8,
}

impl Default for TissueParams {
    fn default() -> Self {
        Self { blobs_min: 2, blobs_max: 3, radius_min: 26.0, radius_max: 38.0, gray: 150 }
    }
}

/// Lesion rectangles, sized in patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionParams {
    pub count_min: usize,
    pub count_max: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub gray: u8,
    /// Signal contrast carried in the class plane.
    pub delta: f64,
}

impl Default for LesionParams {
    fn default() -> Self {
        Self { count_min: 1, count_max: 2, size_min: 1, size_max: 2, gray: 100, delta: 0.7 }
    }
}

/// Single background patches with label-independent signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistractorParams {
    pub count_min: usize,
    pub count_max: usize,
    pub gray: u8,
    pub delta: f64,
}

impl Default for DistractorParams {
    fn default() -> Self {
        Self { count_min: 2, count_max: 3, gray: 200, delta: 2.0 }
    }
}

/// Poisson cell counts: `lambda_in` per lesion patch, `lambda_out` per
/// patch-area of non-lesion tissue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellParams {
    pub lambda_in: f64,
    pub lambda_out: f64,
}

impl Default for CellParams {
    fn default() -> Self {
        Self { lambda_in: 12.0, lambda_out: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlideSpec {
    pub grid: PatchGrid,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Number of feature scales; scale `s` uses patches `2^s` times larger.
    pub scales: usize,
    pub background_gray: u8,
    pub pixel_noise: f64,
    pub feature_noise: f64,
    pub tissue: TissueParams,
    pub lesion: LesionParams,
    pub distractor: DistractorParams,
    pub cells: CellParams,
}

impl Default for SlideSpec {
    fn default() -> Self {
        Self {
            grid: PatchGrid { rows: 8, cols: 8, patch_edge: 16 },
            num_classes: 4,
            feature_dim: 16,
            scales: 1,
            background_gray: 235,
            pixel_noise: 6.0,
            feature_noise: 0.25,
            tissue: TissueParams::default(),
            lesion: LesionParams::default(),
            distractor: DistractorParams::default(),
            cells: CellParams::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> SagError {
    SagError::InvalidArgument(msg.into())
}

impl SlideSpec {
    pub fn validate(&self) -> Result<()> {
        PatchGrid::new(self.grid.rows, self.grid.cols, self.grid.patch_edge)?;
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be at least 2"));
        }
        if crate::models::features::INTENSITY_CHANNELS + self.num_classes > self.feature_dim {
            return Err(invalid(format!("feature_dim {} too small for {} classes", self.feature_dim, self.num_classes)));
        }
        if self.scales == 0 {
            return Err(invalid("scales must be positive"));
        }
        let f = 1usize << (self.scales - 1);
        if !self.grid.rows.is_multiple_of(f) || !self.grid.cols.is_multiple_of(f) {
            return Err(invalid(format!("{}x{} grid cannot be coarsened {} times", self.grid.rows, self.grid.cols, self.scales - 1)));
        }
        let t = &self.tissue;
        if t.blobs_min == 0 || t.blobs_min > t.blobs_max || !(t.radius_min > 0.0 && t.radius_min <= t.radius_max) {
            return Err(invalid("tissue blob ranges"));
        }
        let l = &self.lesion;
        if l.count_min > l.count_max || l.size_min == 0 || l.size_min > l.size_max {
            return Err(invalid("lesion count/size ranges"));
        }
        if self.distractor.count_min > self.distractor.count_max {
            return Err(invalid("distractor count range"));
        }
        let c = &self.cells;
        if !(c.lambda_out >= 0.0 && c.lambda_in > c.lambda_out) {
            return Err(invalid("cell rates need lambda_in > lambda_out >= 0"));
        }
        let finite = [self.pixel_noise, self.feature_noise, l.delta, self.distractor.delta, c.lambda_in];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("noise levels, contrasts and rates must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Grid of scale `s`.
    pub fn scale_grid(&self, s: usize) -> PatchGrid {
        let f = 1usize << s;
        PatchGrid { rows: self.grid.rows / f, cols: self.grid.cols / f, patch_edge: self.grid.patch_edge * f }
    }
}

/// Planted ground truth of one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideTruth {
    pub tissue: BinaryMask,
    pub lesion: BinaryMask,
    pub cells: PointSet,
    /// Finest-scale patch indices covered by distractors.
    pub distractors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlide {
    pub id: String,
    pub seed: u64,
    pub label: usize,
    pub gray: GrayImage,
    pub truth: SlideTruth,
    /// One bag per scale.
    pub bags: Vec<Bag>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn uniform_count(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let d: Poisson<f64> = Poisson::new(lambda).expect("positive rate");
    d.sample(rng) as usize
}

fn tissue_mask(spec: &SlideSpec, rng: &mut ChaCha8Rng) -> BinaryMask {
    let (h, w) = (spec.grid.height(), spec.grid.width());
    let t = &spec.tissue;
    let n = uniform_count(rng, t.blobs_min, t.blobs_max);
    let discs: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| {
            let cx = rng.random_range(0.3..=0.7) * w as f64;
            let cy = rng.random_range(0.3..=0.7) * h as f64;
            (cx, cy, rng.random_range(t.radius_min..=t.radius_max))
        })
        .collect();
    let mut mask = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if discs.iter().any(|&(cx, cy, r)| (px - cx).powi(2) + (py - cy).powi(2) <= r * r) {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

/// Patches whose pixels all satisfy `pred`.
fn patches_where(mask: &BinaryMask, grid: &PatchGrid, want: bool) -> Vec<bool> {
    (0..grid.len())
        .map(|i| {
            let (r0, c0, r1, c1) = grid.patch_bounds(i).expect("index in range");
            (r0..r1).all(|y| (c0..c1).all(|x| mask.get(y, x) == want))
        })
        .collect()
}

fn paint_patch(mask: &mut BinaryMask, grid: &PatchGrid, i: usize) {
    let (r0, c0, r1, c1) = grid.patch_bounds(i).expect("index in range");
    for y in r0..r1 {
        for x in c0..c1 {
            mask.set(y, x, true);
        }
    }
}

/// Places lesion rectangles inside tissue; returns the covered patches.
fn place_lesions(spec: &SlideSpec, tissue_patches: &[bool], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let g = spec.grid;
    let l = &spec.lesion;
    let n = uniform_count(rng, l.count_min, l.count_max);
    let mut used = vec![false; g.len()];
    for k in 0..n {
        let (rh, rw) = (uniform_count(rng, l.size_min, l.size_max), uniform_count(rng, l.size_min, l.size_max));
        let mut candidates = Vec::new();
        for r in 0..g.rows.saturating_sub(rh - 1) {
            for c in 0..g.cols.saturating_sub(rw - 1) {
                let cells = (r..r + rh).flat_map(|rr| (c..c + rw).map(move |cc| rr * g.cols + cc));
                if cells.clone().all(|i| tissue_patches[i] && !used[i]) {
                    candidates.push((r, c));
                }
            }
        }
        if candidates.is_empty() {
            return Err(SagError::Infeasible(format!("lesion {k} of {rh}x{rw} patches does not fit inside tissue")));
        }
        let (r, c) = candidates[rng.random_range(0..candidates.len())];
        for rr in r..r + rh {
            for cc in c..c + rw {
                used[rr * g.cols + cc] = true;
            }
        }
    }
    Ok((0..g.len()).filter(|&i| used[i]).collect())
}

fn place_distractors(
    spec: &SlideSpec,
    background_patches: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let d = &spec.distractor;
    let n = uniform_count(rng, d.count_min, d.count_max);
    let mut free: Vec<usize> = (0..background_patches.len()).filter(|&i| background_patches[i]).collect();
    if free.len() < n {
        return Err(SagError::Infeasible(format!("{n} distractors but {} background patches", free.len())));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let patch = free.swap_remove(rng.random_range(0..free.len()));
        out.push((patch, rng.random_range(0..spec.num_classes)));
    }
    out.sort_unstable();
    Ok(out)
}

fn draw_cells(spec: &SlideSpec, tissue: &BinaryMask, lesion_patches: &[usize], rng: &mut ChaCha8Rng) -> PointSet {
    let g = spec.grid;
    let mut points = Vec::new();
    for &i in lesion_patches {
        let (r0, c0, r1, c1) = g.patch_bounds(i).expect("index in range");
        for _ in 0..poisson(rng, spec.cells.lambda_in) {
            points.push((rng.random_range(c0 as f64..c1 as f64), rng.random_range(r0 as f64..r1 as f64)));
        }
    }
    let lesion_set: std::collections::BTreeSet<usize> = lesion_patches.iter().copied().collect();
    let outside: Vec<(usize, usize)> = (0..g.height())
        .flat_map(|y| (0..g.width()).map(move |x| (y, x)))
        .filter(|&(y, x)| tissue.get(y, x) && !lesion_set.contains(&g.patch_of_pixel(y, x)))
        .collect();
    let n_out = poisson(rng, spec.cells.lambda_out * outside.len() as f64 / g.patch_area() as f64);
    if !outside.is_empty() {
        for _ in 0..n_out {
            let (y, x) = outside[rng.random_range(0..outside.len())];
            points.push((x as f64 + rng.random::<f64>(), y as f64 + rng.random::<f64>()));
        }
    }
    PointSet { points }
}

const LAYOUT_ATTEMPTS: usize = 32;

/// Tissue, lesion and distractor placement. A tissue draw that cannot host
/// the lesions or distractors is redrawn from the same streams.
fn layout(spec: &SlideSpec, seed: u64) -> Result<(BinaryMask, Vec<usize>, Vec<(usize, usize)>)> {
    let g = spec.grid;
    let (mut t_rng, mut l_rng, mut d_rng) =
        (stream(seed, STREAM_TISSUE), stream(seed, STREAM_LESION), stream(seed, STREAM_DISTRACTOR));
    let mut last = None;
    for _ in 0..LAYOUT_ATTEMPTS {
        let tissue = tissue_mask(spec, &mut t_rng);
        let placed = place_lesions(spec, &patches_where(&tissue, &g, true), &mut l_rng).and_then(|lesions| {
            let d = place_distractors(spec, &patches_where(&tissue, &g, false), &mut d_rng)?;
            Ok((lesions, d))
        });
        match placed {
            Ok((lesions, d)) => return Ok((tissue, lesions, d)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Generates one slide of class `label`; deterministic in `(spec, seed, label)`.
pub fn generate_slide(spec: &SlideSpec, seed: u64, label: usize) -> Result<LabeledSlide> {
    spec.validate()?;
    if label >= spec.num_classes {
        return Err(SagError::Bounds { index: label, len: spec.num_classes });
    }
    let g = spec.grid;
    let (h, w) = (g.height(), g.width());

    let (tissue, lesion_patches, distractors) = layout(spec, seed)?;
    let mut lesion = BinaryMask::zeros(h, w);
    for &i in &lesion_patches {
        paint_patch(&mut lesion, &g, i);
    }
    let cells = draw_cells(spec, &tissue, &lesion_patches, &mut stream(seed, STREAM_CELLS));

    let mut base = vec![spec.background_gray as f64; h * w];
    let mut signal = vec![vec![0.0f32; h * w]; spec.num_classes];
    for y in 0..h {
        for x in 0..w {
            let px = y * w + x;
            if lesion.get(y, x) {
                base[px] = spec.lesion.gray as f64;
                signal[label][px] = spec.lesion.delta as f32;
            } else if tissue.get(y, x) {
                base[px] = spec.tissue.gray as f64;
            }
        }
    }
    for &(i, class) in &distractors {
        let (r0, c0, r1, c1) = g.patch_bounds(i)?;
        for y in r0..r1 {
            for x in c0..c1 {
                base[y * w + x] = spec.distractor.gray as f64;
                signal[class][y * w + x] = spec.distractor.delta as f32;
            }
        }
    }
    let mut rng = stream(seed, STREAM_PIXELS);
    let noise = Normal::new(0.0, spec.pixel_noise).map_err(|e| invalid(e.to_string()))?;
    let pixels = base.iter().map(|&v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8).collect();
    let gray = GrayImage::new(h, w, pixels)?;

    let raster = SlideRaster { gray, signal };
    let feature_seed = stream(seed, STREAM_FEATURES).next_u64();
    let bags = (0..spec.scales)
        .map(|s| {
            let grid = spec.scale_grid(s);
            let source = DescriptorSource {
                dim: spec.feature_dim,
                noise_std: spec.feature_noise,
                seed: feature_seed.wrapping_add(s as u64),
            };
            Bag::new(source.features(&raster, &grid)?, label, grid, s)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(LabeledSlide {
        id: format!("slide-{seed:016x}"),
        seed,
        label,
        gray: raster.gray,
        truth: SlideTruth { tissue, lesion, cells, distractors: distractors.iter().map(|d| d.0).collect() },
        bags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { n_train: 200, n_val: 50, n_test: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SlideSpec,
    pub seed: u64,
    pub train: Vec<LabeledSlide>,
    pub val: Vec<LabeledSlide>,
    pub test: Vec<LabeledSlide>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledSlide] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<LabeledSlide> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Per-split slide seeds, each split drawn from its own stream.
pub fn split_seeds(sizes: SplitSizes, seed: u64) -> Result<[Vec<u64>; 3]> {
    let counts = [sizes.n_train, sizes.n_val, sizes.n_test];
    if counts.contains(&0) {
        return Err(invalid("every split needs at least one slide"));
    }
    let seeds = std::array::from_fn(|k| {
        let mut rng = stream(seed, 100 + k as u64);
        (0..counts[k]).map(|_| rng.next_u64()).collect::<Vec<u64>>()
    });
    let mut all: Vec<u64> = seeds.iter().flatten().copied().collect();
    all.sort_unstable();
    if all.windows(2).any(|w| w[0] == w[1]) {
        return Err(SagError::Infeasible("slide seed collision across splits".into()));
    }
    Ok(seeds)
}

/// Generates train/val/test splits; labels cycle round-robin over classes.
pub fn generate_dataset(spec: &SlideSpec, sizes: SplitSizes, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let seeds = split_seeds(sizes, seed)?;
    let make = |k: usize| -> Result<Vec<LabeledSlide>> {
        seeds[k]
            .par_iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut slide = generate_slide(spec, s, i % spec.num_classes)?;
                slide.id = format!("{}-{i:04}", Split::ALL[k].name());
                Ok(slide)
            })
            .collect()
    };
    Ok(Dataset { spec: spec.clone(), seed, train: make(0)?, val: make(1)?, test: make(2)? })
}
