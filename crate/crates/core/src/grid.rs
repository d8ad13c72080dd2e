//! Raster-to-patch bookkeeping.
//!
//! A slide raster of `rows * patch_edge` by `cols * patch_edge` pixels is cut
//! into `rows * cols` square, non-overlapping patches. Patch `i` sits at
//! `(i / cols, i % cols)`; this row-major order is used for features,
//! guidance and attention alike.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SagError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_edge: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_edge: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || patch_edge == 0 {
            return Err(SagError::InvalidArgument(format!(
                "patch grid dimensions must be positive, got {rows}x{cols} with edge {patch_edge}"
            )));
        }
        Ok(Self { rows, cols, patch_edge })
    }

    /// Grid of `patch_edge` patches tiling a `height` x `width` raster.
    pub fn covering(height: usize, width: usize, patch_edge: usize) -> Result<Self> {
        if patch_edge == 0 || !height.is_multiple_of(patch_edge) || !width.is_multiple_of(patch_edge) {
            return Err(SagError::shape(
                format!("raster dimensions divisible by patch edge {patch_edge}"),
                format!("{height}x{width}"),
            ));
        }
        Self::new(height / patch_edge, width / patch_edge, patch_edge)
    }

    /// Number of patches.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_edge
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_edge
    }

    pub fn patch_area(&self) -> usize {
        self.patch_edge * self.patch_edge
    }

    /// `(row, col)` of patch `i`.
    pub fn position(&self, i: usize) -> Result<(usize, usize)> {
        if i >= self.len() {
            return Err(SagError::Bounds { index: i, len: self.len() });
        }
        Ok((i / self.cols, i % self.cols))
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Half-open pixel rectangle `(row0, col0, row1, col1)` of patch `i`.
    pub fn patch_bounds(&self, i: usize) -> Result<(usize, usize, usize, usize)> {
        let (r, c) = self.position(i)?;
        let e = self.patch_edge;
        Ok((r * e, c * e, (r + 1) * e, (c + 1) * e))
    }

    /// Index of the patch containing pixel `(y, x)`.
    pub fn patch_of_pixel(&self, y: usize, x: usize) -> usize {
        self.index(y / self.patch_edge, x / self.patch_edge)
    }

    pub(crate) fn check_raster(&self, height: usize, width: usize) -> Result<()> {
        if height != self.height() || width != self.width() {
            return Err(SagError::shape(
                format!(
                    "{}x{} raster for a {}x{} grid of {}px patches",
                    self.height(),
                    self.width(),
                    self.rows,
                    self.cols,
                    self.patch_edge
                ),
                format!("{height}x{width}"),
            ));
        }
        Ok(())
    }
}

/// Single-channel 8-bit raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SagError::InvalidArgument("empty raster".into()));
        }
        if data.len() != height * width {
            return Err(SagError::shape(height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

/// Raster of `{0, 1}` values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(SagError::shape(height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(SagError::InvalidArgument(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(SagError::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }

    /// Pixel intersection-over-union; two empty masks score 1.
    pub fn iou(&self, other: &Self) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += usize::from(a & b);
            union += usize::from(a | b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Per-patch fraction of set mask pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskAreaRatios {
    pub values: Vec<f64>,
}

impl MaskAreaRatios {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-patch set-pixel counts in row-major patch order.
pub fn patch_counts(mask: &BinaryMask, grid: &PatchGrid) -> Result<Vec<usize>> {
    grid.check_raster(mask.height, mask.width)?;
    let mut counts = vec![0usize; grid.len()];
    for y in 0..mask.height {
        let row = &mask.data[y * mask.width..(y + 1) * mask.width];
        let prow = y / grid.patch_edge;
        for (x, &v) in row.iter().enumerate() {
            counts[prow * grid.cols + x / grid.patch_edge] += v as usize;
        }
    }
    Ok(counts)
}

pub fn patchify(mask: &BinaryMask, grid: &PatchGrid) -> Result<MaskAreaRatios> {
    let area = grid.patch_area() as f64;
    let values = patch_counts(mask, grid)?
        .into_iter()
        .map(|c| c as f64 / area)
        .collect();
    Ok(MaskAreaRatios { values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_and_empty_masks() {
        let grid = PatchGrid::new(3, 2, 4).unwrap();
        let ones = patchify(&BinaryMask::ones(12, 8), &grid).unwrap();
        assert!(ones.values.iter().all(|&v| v == 1.0));
        let zeros = patchify(&BinaryMask::zeros(12, 8), &grid).unwrap();
        assert!(zeros.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn top_left_patch_only() {
        let grid = PatchGrid::new(2, 2, 2).unwrap();
        let mut mask = BinaryMask::zeros(4, 4);
        for y in 0..2 {
            for x in 0..2 {
                mask.set(y, x, true);
            }
        }
        assert_eq!(patchify(&mask, &grid).unwrap().values, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_names_both_shapes() {
        let grid = PatchGrid::new(2, 2, 4).unwrap();
        let err = patchify(&BinaryMask::zeros(8, 9), &grid).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("8x8") && msg.contains("8x9"), "{msg}");
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(PatchGrid::new(1, 1, 8).unwrap().patch_bounds(0).unwrap(), (0, 0, 8, 8));
        assert_eq!(PatchGrid::new(2, 2, 4).unwrap().patch_bounds(3).unwrap(), (4, 4, 8, 8));
        assert_eq!(PatchGrid::new(2, 3, 2).unwrap().patch_bounds(4).unwrap(), (2, 2, 4, 4));
        assert!(matches!(
            PatchGrid::new(2, 3, 2).unwrap().patch_bounds(6),
            Err(SagError::Bounds { index: 6, len: 6 })
        ));
    }

    #[test]
    fn unaligned_rasters_rejected() {
        assert!(PatchGrid::covering(10, 8, 4).is_err());
        assert_eq!(PatchGrid::covering(12, 8, 4).unwrap(), PatchGrid::new(3, 2, 4).unwrap());
        assert!(PatchGrid::new(0, 2, 4).is_err());
    }

    #[test]
    fn mask_values_must_be_binary() {
        assert!(BinaryMask::from_vec(1, 2, vec![0, 2]).is_err());
    }
}
