//! Patch feature extraction.
//!
//! Stands in for a pretrained patch encoder: each patch is described by
//! intensity statistics of the gray raster, the patch means of any planted
//! signal planes, and seeded Gaussian noise.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SagError};
use crate::grid::{GrayImage, PatchGrid};

/// A slide as seen by a feature source.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRaster {
    pub gray: GrayImage,
    /// Optional per-pixel signal planes, each `height * width`, row-major.
    pub signal: Vec<Vec<f32>>,
}

impl SlideRaster {
    pub fn plain(gray: GrayImage) -> Self {
        Self { gray, signal: Vec::new() }
    }
}

pub trait FeatureSource {
    fn dim(&self) -> usize;

    /// `p x dim` matrix whose row `i` describes patch `i`.
    fn features(&self, slide: &SlideRaster, grid: &PatchGrid) -> Result<Array2<f64>>;
}

/// Deterministic per-patch descriptors.
///
/// Channels: 0 mean darkness `(255 - mean) / 64`, 1 intensity standard deviation
/// over 64, then one channel per signal plane; remaining channels carry only
/// noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSource {
    pub dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

pub const INTENSITY_CHANNELS: usize = 2;

impl FeatureSource for DescriptorSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, slide: &SlideRaster, grid: &PatchGrid) -> Result<Array2<f64>> {
        let gray = &slide.gray;
        grid.check_raster(gray.height(), gray.width())?;
        if INTENSITY_CHANNELS + slide.signal.len() > self.dim {
            return Err(SagError::shape(
                format!("at most {} signal planes", self.dim.saturating_sub(INTENSITY_CHANNELS)),
                slide.signal.len(),
            ));
        }
        let n_px = gray.height() * gray.width();
        if let Some(bad) = slide.signal.iter().find(|plane| plane.len() != n_px) {
            return Err(SagError::shape(n_px, bad.len()));
        }
        let mut out = Array2::zeros((grid.len(), self.dim));
        let area = grid.patch_area() as f64;
        for i in 0..grid.len() {
            let (r0, c0, r1, c1) = grid.patch_bounds(i)?;
            let (mut sum, mut sum2) = (0.0, 0.0);
            let mut sig = vec![0.0f64; slide.signal.len()];
            for y in r0..r1 {
                for x in c0..c1 {
                    let v = gray.get(y, x) as f64;
                    sum += v;
                    sum2 += v * v;
                    for (acc, plane) in sig.iter_mut().zip(&slide.signal) {
                        *acc += plane[y * gray.width() + x] as f64;
                    }
                }
            }
            let mean = sum / area;
            let var = (sum2 / area - mean * mean).max(0.0);
            out[[i, 0]] = (255.0 - mean) / 64.0;
            out[[i, 1]] = var.sqrt() / 64.0;
            for (c, acc) in sig.iter().enumerate() {
                out[[i, INTENSITY_CHANNELS + c]] = acc / area;
            }
        }
        if self.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (grid.patch_edge as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let normal = Normal::new(0.0, self.noise_std).map_err(|e| SagError::InvalidArgument(e.to_string()))?;
            out.mapv_inplace(|v| v + normal.sample(&mut rng));
        }
        Ok(out)
    }
}

/// Fixed sinusoidal encoding of each patch's `(row, col)`: the first half of
/// the channels encodes the row, the second half the column.
pub fn positional_encoding(grid: &PatchGrid, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((grid.len(), dim), |(i, d)| {
        let (row, col) = (i / grid.cols, i % grid.cols);
        let (pos, j, width) = if d < half { (row, d, half) } else { (col, d - half, dim - half) };
        let freq = 10000f64.powf(-((j / 2 * 2) as f64) / width.max(1) as f64);
        let angle = pos as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(noise: f64) -> DescriptorSource {
        DescriptorSource { dim: 8, noise_std: noise, seed: 11 }
    }

    #[test]
    fn blank_slide_rows_identical() {
        let grid = PatchGrid::new(3, 3, 4).unwrap();
        let f = source(0.0).features(&SlideRaster::plain(GrayImage::filled(12, 12, 200)), &grid).unwrap();
        for row in f.rows() {
            assert_eq!(row, f.row(0));
        }
    }

    #[test]
    fn planted_signal_shows_in_its_patch_only() {
        let grid = PatchGrid::new(2, 2, 4).unwrap();
        let mut plane = vec![0.0f32; 64];
        for y in 4..8 {
            for x in 0..4 {
                plane[y * 8 + x] = 2.0;
            }
        }
        let slide = SlideRaster { gray: GrayImage::filled(8, 8, 230), signal: vec![plane] };
        let f = source(0.0).features(&slide, &grid).unwrap();
        assert_eq!(f[[2, INTENSITY_CHANNELS]], 2.0);
        for i in [0, 1, 3] {
            assert_eq!(f[[i, INTENSITY_CHANNELS]], 0.0);
        }
    }

    #[test]
    fn same_seed_same_features() {
        let grid = PatchGrid::new(2, 2, 4).unwrap();
        let slide = SlideRaster::plain(GrayImage::filled(8, 8, 100));
        let a = source(0.3).features(&slide, &grid).unwrap();
        let b = source(0.3).features(&slide, &grid).unwrap();
        assert_eq!(a, b);
        let c = DescriptorSource { seed: 12, ..source(0.3) }.features(&slide, &grid).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn misaligned_raster_rejected() {
        let grid = PatchGrid::new(2, 2, 4).unwrap();
        assert!(source(0.0).features(&SlideRaster::plain(GrayImage::filled(8, 9, 0)), &grid).is_err());
    }

    #[test]
    fn encoding_distinguishes_positions() {
        let grid = PatchGrid::new(3, 3, 1).unwrap();
        let pe = positional_encoding(&grid, 8);
        for i in 0..9 {
            for j in 0..i {
                assert!(pe.row(i) != pe.row(j));
            }
        }
    }
}
