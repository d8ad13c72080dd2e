use crate::error::{Result, SagError};
use crate::grid::{BinaryMask, PatchGrid};

use super::hull::ConvexPolygon;

/// Half-width used to thicken point and segment hulls.
pub const DEGENERATE_HALF_WIDTH: f64 = 0.5;

/// Union of hulls as a mask: a pixel is set iff its center lies inside or on
/// some hull. Pixel `(y, x)` has center `(x + 0.5, y + 0.5)`.
pub fn rasterize_hulls(hulls: &[ConvexPolygon], grid: &PatchGrid) -> Result<BinaryMask> {
    let (h, w) = (grid.height(), grid.width());
    let mut mask = BinaryMask::zeros(h, w);
    for hull in hulls {
        let Some((x0, y0, x1, y1)) = hull.bbox() else {
            continue;
        };
        if !(x0 >= 0.0 && y0 >= 0.0 && x1 <= w as f64 && y1 <= h as f64) {
            return Err(SagError::InvalidArgument(format!(
                "hull bounds ({x0}, {y0})-({x1}, {y1}) exceed {w}x{h} raster"
            )));
        }
        let pad = if hull.is_degenerate() { DEGENERATE_HALF_WIDTH } else { 0.0 };
        // Pixel centers c = i + 0.5 with x0 - pad <= c <= x1 + pad.
        let lo = |v: f64| ((v - pad - 0.5).ceil().max(0.0)) as usize;
        let hi = |v: f64, n: usize| (((v + pad - 0.5).floor() + 1.0).max(0.0) as usize).min(n);
        for y in lo(y0)..hi(y1, h) {
            for x in lo(x0)..hi(x1, w) {
                if !mask.get(y, x) && hull.contains((x as f64 + 0.5, y as f64 + 0.5), DEGENERATE_HALF_WIDTH) {
                    mask.set(y, x, true);
                }
            }
        }
    }
    Ok(mask)
}
