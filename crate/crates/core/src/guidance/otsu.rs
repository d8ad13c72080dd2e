use crate::error::{Result, SagError};
use crate::grid::{BinaryMask, GrayImage, PatchGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OtsuThreshold {
    /// Pixels `< threshold` form the lower class.
    pub threshold: u32,
    /// Set when the histogram has a single occupied level.
    pub degenerate: bool,
}

/// Otsu threshold over a histogram of `hist.len()` levels.
///
/// Maximizes the between-class variance `w0 * w1 * (mu0 - mu1)^2` of the
/// split `{< t}` / `{>= t}`; the smallest maximizing `t` wins.
pub fn otsu_from_histogram(hist: &[u64]) -> OtsuThreshold {
    let total: u64 = hist.iter().sum();
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if total == 0 || occupied < 2 {
        return OtsuThreshold { threshold: 0, degenerate: true };
    }
    let total_f = total as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();

    let mut best_t = 0u32;
    let mut best = -1.0f64;
    let mut w0 = 0u64;
    let mut sum0 = 0.0f64;
    for t in 1..hist.len() {
        w0 += hist[t - 1];
        sum0 += (t - 1) as f64 * hist[t - 1] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (sum_all - sum0) / w1 as f64;
        let var = (w0 as f64 / total_f) * (w1 as f64 / total_f) * (mu0 - mu1).powi(2);
        // Relative slack so that splits equal in exact arithmetic tie.
        if var > best * (1.0 + 1e-10) + 1e-300 {
            best = var;
            best_t = t as u32;
        }
    }
    OtsuThreshold { threshold: best_t, degenerate: false }
}

pub fn otsu_threshold(gray: &GrayImage, levels: usize) -> Result<OtsuThreshold> {
    if levels == 0 {
        return Err(SagError::InvalidArgument("levels must be positive".into()));
    }
    let mut hist = vec![0u64; levels];
    for &v in gray.data() {
        let slot = hist.get_mut(v as usize).ok_or_else(|| {
            SagError::InvalidArgument(format!("pixel value {v} outside [0, {levels})"))
        })?;
        *slot += 1;
    }
    Ok(otsu_from_histogram(&hist))
}

/// Which side of the Otsu split is tissue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissuePolarity {
    /// Tissue is darker than the background (brightfield H&E).
    #[default]
    Darker,
    Lighter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    pub mask: BinaryMask,
    pub threshold: OtsuThreshold,
}

pub fn tissue_mask(image: &GrayImage, grid: &PatchGrid, polarity: TissuePolarity) -> Result<TissueMask> {
    grid.check_raster(image.height(), image.width())?;
    let threshold = otsu_threshold(image, 256)?;
    if threshold.degenerate {
        return Ok(TissueMask {
            mask: BinaryMask::zeros(image.height(), image.width()),
            threshold,
        });
    }
    let t = threshold.threshold;
    let data = image
        .data()
        .iter()
        .map(|&v| {
            let below = (v as u32) < t;
            u8::from(match polarity {
                TissuePolarity::Darker => below,
                TissuePolarity::Lighter => !below,
            })
        })
        .collect();
    Ok(TissueMask {
        mask: BinaryMask::from_vec(image.height(), image.width(), data)?,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exhaustive(hist: &[u64]) -> (u32, f64) {
        // Direct variance-of-class-means definition, recomputed per split.
        let n: f64 = hist.iter().sum::<u64>() as f64;
        let mut best = (0u32, -1.0f64);
        for t in 0..=hist.len() {
            let (lo, hi) = hist.split_at(t);
            let c0: f64 = lo.iter().sum::<u64>() as f64;
            let c1: f64 = hi.iter().sum::<u64>() as f64;
            if c0 == 0.0 || c1 == 0.0 {
                continue;
            }
            let m0 = lo.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum::<f64>() / c0;
            let m1 = hi.iter().enumerate().map(|(v, &c)| (v + t) as f64 * c as f64).sum::<f64>() / c1;
            let mean = (c0 * m0 + c1 * m1) / n;
            let var = (c0 * (m0 - mean).powi(2) + c1 * (m1 - mean).powi(2)) / n;
            if var > best.1 * (1.0 + 1e-10) {
                best = (t as u32, var);
            }
        }
        best
    }

    #[test]
    fn two_level_image_splits_at_smallest_perfect_threshold() {
        let mut data = vec![10u8; 32];
        data.extend(vec![200u8; 32]);
        let img = GrayImage::new(8, 8, data).unwrap();
        let t = otsu_threshold(&img, 256).unwrap();
        assert_eq!(t, OtsuThreshold { threshold: 11, degenerate: false });
        let mut hist = vec![0u64; 256];
        hist[10] = 32;
        hist[200] = 32;
        assert_eq!(exhaustive(&hist).0, 11);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = GrayImage::filled(4, 4, 240);
        assert_eq!(otsu_threshold(&img, 256).unwrap(), OtsuThreshold { threshold: 0, degenerate: true });
        let grid = PatchGrid::new(1, 1, 4).unwrap();
        let tm = tissue_mask(&img, &grid, TissuePolarity::Darker).unwrap();
        assert_eq!(tm.mask.count_ones(), 0);
        assert!(tm.threshold.degenerate);
    }

    #[test]
    fn bimodal_mixture_threshold_sits_in_valley() {
        let hist: Vec<u64> = (0..256)
            .map(|v| {
                let g = |mu: f64, sd: f64| (-(v as f64 - mu).powi(2) / (2.0 * sd * sd)).exp();
                (1000.0 * g(60.0, 12.0) + 700.0 * g(190.0, 15.0)).round() as u64
            })
            .collect();
        let t = otsu_from_histogram(&hist);
        assert_eq!(t.threshold, exhaustive(&hist).0);
        assert!((95..=150).contains(&t.threshold), "{t:?}");
    }

    #[test]
    fn dark_rectangle_on_white_is_recovered() {
        let grid = PatchGrid::new(2, 2, 8).unwrap();
        let mut img = GrayImage::filled(16, 16, 240);
        let mut truth = BinaryMask::zeros(16, 16);
        for y in 3..11 {
            for x in 5..14 {
                img.set(y, x, 90);
                truth.set(y, x, true);
            }
        }
        let tm = tissue_mask(&img, &grid, TissuePolarity::Darker).unwrap();
        assert_eq!(tm.mask, truth);
        let flipped = tissue_mask(&img, &grid, TissuePolarity::Lighter).unwrap();
        assert_eq!(flipped.mask, truth.complement());
    }

    #[test]
    fn out_of_range_levels_rejected() {
        let img = GrayImage::filled(2, 2, 9);
        assert!(otsu_threshold(&img, 8).is_err());
        assert!(otsu_threshold(&img, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn matches_exhaustive_search(hist in proptest::collection::vec(0u64..50, 2..40)) {
            let fast = otsu_from_histogram(&hist);
            if hist.iter().filter(|&&c| c > 0).count() < 2 {
                proptest::prop_assert!(fast.degenerate);
            } else {
                proptest::prop_assert_eq!(fast.threshold, exhaustive(&hist).0);
            }
        }
    }
}
