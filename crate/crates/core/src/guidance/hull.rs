use serde::{Deserialize, Serialize};

/// Convex polygon with counterclockwise vertices and no three collinear.
///
/// Fewer than three vertices encode a degenerate hull: a single point or a
/// segment between two extreme points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    pub vertices: Vec<(f64, f64)>,
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

impl ConvexPolygon {
    pub fn is_degenerate(&self) -> bool {
        self.vertices.len() < 3
    }

    /// Signed area (positive for counterclockwise order).
    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        if v.len() < 3 {
            return 0.0;
        }
        0.5 * (0..v.len())
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % v.len()]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum::<f64>()
    }

    /// Boundary-inclusive containment test.
    ///
    /// Degenerate hulls contain the points within `thickness` of their
    /// point or segment.
    pub fn contains(&self, p: (f64, f64), thickness: f64) -> bool {
        let v = &self.vertices;
        match v.len() {
            0 => false,
            1 => dist_to_segment(p, v[0], v[0]) <= thickness,
            2 => dist_to_segment(p, v[0], v[1]) <= thickness,
            n => (0..n).all(|i| {
                let (a, b) = (v[i], v[(i + 1) % n]);
                let edge_len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                cross(a, b, p) >= -1e-9 * edge_len.max(1.0)
            }),
        }
    }

    /// Axis-aligned bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bbox(&self) -> Option<(f64, f64, f64, f64)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold(
            (first.0, first.1, first.0, first.1),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        ))
    }
}

/// Andrew's monotone chain; collinear boundary points are dropped.
pub fn convex_hull(points: &[(f64, f64)]) -> ConvexPolygon {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return ConvexPolygon { vertices: pts };
    }
    let mut lower: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        // All input points collinear: keep the two extremes.
        let (a, b) = (pts[0], pts[pts.len() - 1]);
        return ConvexPolygon { vertices: vec![a, b] };
    }
    ConvexPolygon { vertices: lower }
}
