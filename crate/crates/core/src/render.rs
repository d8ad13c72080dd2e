//! Attention and guidance heatmaps as PGM rasters.
//!
//! A per-patch vector is min-max normalized to `[0, 255]` and each patch is
//! drawn as a flat block covering its pixel rectangle. A constant vector has
//! no range to normalize and renders as flat mid-gray.

use crate::error::{Result, SagError};
use crate::grid::PatchGrid;
use crate::pgm::Pgm;

pub const MAXVAL: u16 = 255;
pub const MIDGRAY: u16 = 128;

/// Min-max normalization onto `0..=MAXVAL`.
pub fn normalize(values: &[f64]) -> Result<Vec<u16>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SagError::NonFinite("heatmap values"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(vec![MIDGRAY; values.len()]);
    }
    Ok(values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * MAXVAL as f64).round() as u16)
        .collect())
}

/// Patch-block heatmap of `values`, one entry per patch in row-major order.
pub fn heatmap(values: &[f64], grid: &PatchGrid) -> Result<Pgm> {
    if values.len() != grid.len() {
        return Err(SagError::shape(format!("{} patch values", grid.len()), values.len()));
    }
    let levels = normalize(values)?;
    let (h, w) = (grid.height(), grid.width());
    let edge = grid.patch_edge;
    let data = (0..h * w)
        .map(|px| {
            let (y, x) = (px / w, px % w);
            levels[(y / edge) * grid.cols + x / edge]
        })
        .collect();
    Ok(Pgm { width: w, height: h, maxval: MAXVAL, data })
}

/// Images placed left to right, separated by `gap` columns of white.
pub fn side_by_side(images: &[&Pgm], gap: usize) -> Result<Pgm> {
    let first = images.first().ok_or_else(|| SagError::InvalidArgument("no images to join".into()))?;
    let height = first.height;
    if let Some(bad) = images.iter().find(|im| im.height != height || im.maxval != first.maxval) {
        return Err(SagError::shape(format!("height {height}, maxval {}", first.maxval), format!("height {}, maxval {}", bad.height, bad.maxval)));
    }
    let width = images.iter().map(|im| im.width).sum::<usize>() + gap * (images.len() - 1);
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for (i, im) in images.iter().enumerate() {
            if i > 0 {
                data.extend(std::iter::repeat_n(first.maxval, gap));
            }
            data.extend_from_slice(&im.data[y * im.width..(y + 1) * im.width]);
        }
    }
    Ok(Pgm { width, height, maxval: first.maxval, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_midgray() {
        let g = PatchGrid::new(2, 3, 4).unwrap();
        let im = heatmap(&[1.0 / 6.0; 6], &g).unwrap();
        assert_eq!((im.width, im.height), (12, 8));
        assert!(im.data.iter().all(|&v| v == MIDGRAY));
    }

    #[test]
    fn one_hot_lights_one_block() {
        let g = PatchGrid::new(2, 2, 3).unwrap();
        let im = heatmap(&[0.0, 0.0, 1.0, 0.0], &g).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let want = if y >= 3 && x < 3 { MAXVAL } else { 0 };
                assert_eq!(im.data[y * 6 + x], want, "({y}, {x})");
            }
        }
    }

    #[test]
    fn normalized_range_is_full() {
        let v = normalize(&[0.3, 0.1, 0.25, 0.2]).unwrap();
        assert_eq!(v.iter().min(), Some(&0));
        assert_eq!(v.iter().max(), Some(&MAXVAL));
        assert!(normalize(&[f64::NAN]).is_err());
    }

    #[test]
    fn join_with_gap() {
        let g = PatchGrid::new(1, 1, 2).unwrap();
        let a = heatmap(&[1.0], &g).unwrap();
        let j = side_by_side(&[&a, &a], 1).unwrap();
        assert_eq!((j.width, j.height), (5, 2));
        assert_eq!(&j.data[..5], &[MIDGRAY, MIDGRAY, MAXVAL, MIDGRAY, MIDGRAY]);
    }
}
