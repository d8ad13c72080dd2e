use crate::error::{Result, SagError};

use super::PointSet;

pub const NOISE: i64 = -1;

/// Per-point cluster labels: `-1` for noise, `0..K` for clusters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClusterLabeling {
    pub labels: Vec<i64>,
    pub core: Vec<bool>,
}

impl ClusterLabeling {
    pub fn num_clusters(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
    }

    /// Points of cluster `k`, in input order.
    pub fn members<'a>(&'a self, points: &'a PointSet, k: i64) -> impl Iterator<Item = (f64, f64)> + 'a {
        self.labels
            .iter()
            .zip(&points.points)
            .filter(move |(&l, _)| l == k)
            .map(|(_, &p)| p)
    }
}

/// Density-based clustering.
///
/// A point is core when at least `min_samples` points, itself included, lie
/// within Euclidean distance `eps`. Clusters are connected components of
/// cores under the `eps` relation and are numbered by their lowest-index core.
/// A non-core point within `eps` of some core takes the label of the
/// lowest-index such core; all other points are noise.
pub fn dbscan(points: &PointSet, eps: f64, min_samples: usize) -> Result<ClusterLabeling> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SagError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if min_samples == 0 {
        return Err(SagError::InvalidArgument("min_samples must be at least 1".into()));
    }
    let pts = &points.points;
    let n = pts.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    let dx = pts[i].0 - pts[j].0;
                    let dy = pts[i].1 - pts[j].1;
                    dx * dx + dy * dy <= eps2
                })
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut labels = vec![NOISE; n];
    let mut next = 0i64;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        labels[seed] = next;
        stack.push(seed);
        while let Some(i) = stack.pop() {
            for &j in &neighbors[i] {
                if core[j] && labels[j] == NOISE {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            if let Some(&c) = neighbors[i].iter().find(|&&j| core[j]) {
                labels[i] = labels[c];
            }
        }
    }
    Ok(ClusterLabeling { labels, core })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(points: &[(f64, f64)]) -> PointSet {
        PointSet { points: points.to_vec() }
    }

    #[test]
    fn two_separated_groups() {
        let mut pts = Vec::new();
        for k in 0..5 {
            pts.push((10.0 + 3.0 * k as f64, 10.0));
        }
        for k in 0..5 {
            pts.push((100.0, 50.0 + 3.0 * k as f64));
        }
        let lab = dbscan(&ps(&pts), 20.0, 5).unwrap();
        assert_eq!(lab.labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(lab.num_clusters(), 2);
    }

    #[test]
    fn sparse_group_is_noise() {
        let lab = dbscan(&ps(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]), 5.0, 5).unwrap();
        assert_eq!(lab.labels, vec![NOISE; 4]);
    }

    #[test]
    fn singleton_cluster_with_min_samples_one() {
        let lab = dbscan(&ps(&[(3.0, 4.0)]), 1.0, 1).unwrap();
        assert_eq!(lab.labels, vec![0]);
    }

    #[test]
    fn empty_input_gives_empty_labeling() {
        let lab = dbscan(&PointSet::default(), 1.0, 3).unwrap();
        assert!(lab.labels.is_empty());
        assert_eq!(lab.num_clusters(), 0);
    }

    #[test]
    fn border_point_goes_to_lowest_indexed_core() {
        // Cores at 0..4 (left) and 4..8 (right); point 8 sits between both.
        let pts = [
            (0.0, 0.0),
            (0.5, 0.0),
            (1.0, 0.0),
            (1.2, 0.0),
            (3.8, 0.0),
            (4.0, 0.0),
            (4.5, 0.0),
            (5.0, 0.0),
            (2.5, 0.0),
        ];
        let lab = dbscan(&ps(&pts), 1.4, 4).unwrap();
        assert_eq!(lab.labels, vec![0, 0, 0, 0, 1, 1, 1, 1, 0]);
        assert!(!lab.core[8]);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(dbscan(&ps(&[(0.0, 0.0)]), 0.0, 1).is_err());
        assert!(dbscan(&ps(&[(0.0, 0.0)]), 1.0, 0).is_err());
    }
}
