//! Attention-supervision signals.
//!
//! Tissue guidance (TG) comes from an Otsu tissue mask. Heuristic guidance
//! (HG) comes from detected cell points: DBSCAN clusters are wrapped in convex
//! hulls and the union of hulls is rasterized. Either mask is reduced to
//! per-patch area ratios and normalized to a distribution over patches.

pub mod dbscan;
pub mod hull;
pub mod otsu;
pub mod raster;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SagError};
use crate::grid::{patchify, BinaryMask, GrayImage, MaskAreaRatios, PatchGrid};

pub use dbscan::{dbscan, ClusterLabeling, NOISE};
pub use hull::{convex_hull, ConvexPolygon};
pub use otsu::{otsu_from_histogram, otsu_threshold, tissue_mask, OtsuThreshold, TissueMask, TissuePolarity};
pub use raster::rasterize_hulls;

pub const DEFAULT_EPS: f64 = 20.0;
pub const DEFAULT_MIN_SAMPLES: usize = 5;

/// Detected entity locations in pixel coordinates (`x` = column, `y` = row).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<(f64, f64)>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, grid: &PatchGrid) -> Result<()> {
        let (w, h) = (grid.width() as f64, grid.height() as f64);
        for &(x, y) in &self.points {
            if !(x >= 0.0 && x <= w && y >= 0.0 && y <= h) {
                return Err(SagError::InvalidArgument(format!(
                    "point ({x}, {y}) outside {}x{} raster",
                    grid.width(),
                    grid.height()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuidanceKind {
    #[serde(rename = "TG")]
    Tissue,
    #[serde(rename = "HG")]
    Heuristic,
}

impl GuidanceKind {
    pub fn tag(self) -> &'static str {
        match self {
            GuidanceKind::Tissue => "tg",
            GuidanceKind::Heuristic => "hg",
        }
    }
}

/// Per-patch guidance distribution. Serialized as
/// `{kind, grid: {rows, cols, patch_edge}, weights: [...], degenerate}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceWeights {
    pub kind: GuidanceKind,
    pub grid: PatchGrid,
    pub weights: Vec<f64>,
    pub degenerate: bool,
}

impl GuidanceWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Checks the serialized invariants after loading from disk.
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.grid.len() {
            return Err(SagError::Alignment(format!(
                "{} weights for a {}-patch grid",
                self.weights.len(),
                self.grid.len()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SagError::InvalidArgument("guidance weights must be finite and nonnegative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        let ok = if self.degenerate { sum == 0.0 } else { (sum - 1.0).abs() <= 1e-9 };
        if !ok {
            return Err(SagError::InvalidArgument(format!(
                "guidance weights sum to {sum} (degenerate = {})",
                self.degenerate
            )));
        }
        Ok(())
    }
}

/// Normalizes area ratios to sum to one. An all-zero input yields all-zero
/// weights flagged degenerate.
pub fn guidance_weights(ratios: &MaskAreaRatios, kind: GuidanceKind, grid: PatchGrid) -> Result<GuidanceWeights> {
    if ratios.len() != grid.len() {
        return Err(SagError::shape(format!("{} ratios", grid.len()), ratios.len()));
    }
    if ratios.values.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(SagError::InvalidArgument("mask ratios must be finite and nonnegative".into()));
    }
    let total: f64 = ratios.values.iter().sum();
    if total == 0.0 {
        return Ok(GuidanceWeights { kind, grid, weights: vec![0.0; ratios.len()], degenerate: true });
    }
    Ok(GuidanceWeights {
        kind,
        grid,
        weights: ratios.values.iter().map(|r| r / total).collect(),
        degenerate: false,
    })
}

/// Weights from an arbitrary mask.
pub fn mask_guidance(mask: &BinaryMask, grid: &PatchGrid, kind: GuidanceKind) -> Result<GuidanceWeights> {
    guidance_weights(&patchify(mask, grid)?, kind, *grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HgParams {
    pub eps: f64,
    pub min_samples: usize,
}

impl Default for HgParams {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS, min_samples: DEFAULT_MIN_SAMPLES }
    }
}

/// Cluster hulls of a point set; noise points contribute nothing.
pub fn cluster_hulls(points: &PointSet, params: HgParams) -> Result<Vec<ConvexPolygon>> {
    let labels = dbscan(points, params.eps, params.min_samples)?;
    Ok((0..labels.num_clusters() as i64)
        .map(|k| convex_hull(&labels.members(points, k).collect::<Vec<_>>()))
        .collect())
}

/// Heuristic-guidance mask: the union of rasterized cluster hulls.
pub fn hg_mask(points: &PointSet, grid: &PatchGrid, params: HgParams) -> Result<BinaryMask> {
    points.check_bounds(grid)?;
    rasterize_hulls(&cluster_hulls(points, params)?, grid)
}

pub fn build_hg(points: &PointSet, grid: &PatchGrid, params: HgParams) -> Result<GuidanceWeights> {
    mask_guidance(&hg_mask(points, grid, params)?, grid, GuidanceKind::Heuristic)
}

pub fn build_tg(image: &GrayImage, grid: &PatchGrid, polarity: TissuePolarity) -> Result<GuidanceWeights> {
    let tm = tissue_mask(image, grid, polarity)?;
    mask_guidance(&tm.mask, grid, GuidanceKind::Tissue)
}
