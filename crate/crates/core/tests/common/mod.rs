//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sag_core::grid::PatchGrid;
use sag_core::guidance::{guidance_weights, GuidanceKind, GuidanceWeights};
use sag_core::grid::MaskAreaRatios;
use sag_core::losses::{sag_terms, SagLossOptions, SagTerms, ScaleGuidance};
use sag_core::models::{ArchConfig, Bag, HeadPartition, Model, ModelKind, ModelParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// DBSCAN by explicit reachability closure over core points.
///
/// Clusters are numbered in order of their lowest-index core; a border point
/// takes the cluster of its lowest-index core neighbor.
pub fn dbscan_reference(points: &[(f64, f64)], eps: f64, min_samples: usize) -> Vec<i64> {
    let n = points.len();
    let near = |i: usize, j: usize| {
        let (a, b) = (points[i], points[j]);
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= eps
    };
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_samples).collect();
    // reach[i][j]: core j reachable from core i through cores
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = core[i] && core[j] && near(i, j);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let mut labels = vec![-1i64; n];
    let mut next = 0;
    for i in 0..n {
        if core[i] && labels[i] == -1 {
            for j in 0..n {
                if reach[i][j] {
                    labels[j] = next;
                }
            }
            next += 1;
        }
    }
    for i in 0..n {
        if !core[i] {
            if let Some(c) = (0..n).find(|&j| core[j] && near(i, j)) {
                labels[i] = labels[c];
            }
        }
    }
    labels
}

/// Threshold maximizing between-class variance by direct evaluation of
/// every split; ties (relative 1e-10) go to the smallest threshold.
pub fn otsu_reference(hist: &[u64]) -> Option<u32> {
    let total: u64 = hist.iter().sum();
    let mut scores = Vec::new();
    for t in 1..hist.len() {
        let (lo, hi) = hist.split_at(t);
        let (w0, w1) = (lo.iter().sum::<u64>(), hi.iter().sum::<u64>());
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = lo.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum::<f64>() / w0 as f64;
        let m1 = hi.iter().enumerate().map(|(v, &c)| (v + t) as f64 * c as f64).sum::<f64>() / w1 as f64;
        let (p0, p1) = (w0 as f64 / total as f64, w1 as f64 / total as f64);
        scores.push((t as u32, p0 * p1 * (m0 - m1).powi(2)));
    }
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    scores.iter().find(|s| s.1 >= best * (1.0 - 1e-10)).map(|s| s.0)
}

/// Random bag of `p` patches laid out as `rows x cols`.
pub fn random_bag(r: &mut ChaCha8Rng, grid: PatchGrid, e: usize, label: usize, scale: usize) -> Bag {
    let f = Array2::from_shape_fn((grid.len(), e), |_| r.random_range(-1.0..1.0));
    Bag::new(f, label, grid, scale).unwrap()
}

/// Random guidance with some zero patches, never degenerate.
pub fn random_guidance(r: &mut ChaCha8Rng, grid: PatchGrid, kind: GuidanceKind) -> GuidanceWeights {
    let p = grid.len();
    let mut values: Vec<f64> = (0..p).map(|_| if r.random_bool(0.4) { 0.0 } else { r.random_range(0.05..1.0) }).collect();
    if values.iter().all(|&v| v == 0.0) {
        values[r.random_range(0..p)] = 1.0;
    }
    guidance_weights(&MaskAreaRatios { values }, kind, grid).unwrap()
}

pub struct GradCase {
    pub model: Model,
    pub params: ModelParams,
    pub bags: Vec<Bag>,
    pub partition: HeadPartition,
    pub opts: SagLossOptions,
}

impl GradCase {
    /// Small random case: `p <= 6`, `e <= 8`, `d_k <= 4`.
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let kind = if seed.is_multiple_of(2) { ModelKind::Transformer } else { ModelKind::Mil };
        let shapes = [(1, 2), (1, 3), (2, 2), (1, 5), (2, 3), (3, 2), (1, 6)];
        let num_scales = if r.random_bool(0.25) { 2 } else { 1 };
        let arch = ArchConfig {
            kind,
            feature_dim: r.random_range(2..=8),
            num_classes: r.random_range(2..=4),
            num_scales,
            layers: r.random_range(1..=2),
            heads: r.random_range(1..=4),
            d_k: r.random_range(1..=4),
            ff_dim: r.random_range(1..=6),
            mil_hidden: r.random_range(1..=6),
            pe_scale: 0.1,
        };
        let model = Model::new(arch.clone()).unwrap();
        let mut params = model.init_params(seed);
        for v in params.values[model.layout.log_vars.range()].iter_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        let label = r.random_range(0..arch.num_classes);
        let bags: Vec<Bag> = (0..num_scales)
            .map(|s| {
                let (rows, cols) = shapes[r.random_range(0..shapes.len())];
                let grid = PatchGrid::new(rows, cols, 4).unwrap();
                let mut b = random_bag(&mut r, grid, arch.feature_dim, label, s);
                b.guidance.tg = Some(random_guidance(&mut r, grid, GuidanceKind::Tissue));
                b.guidance.hg = Some(random_guidance(&mut r, grid, GuidanceKind::Heuristic));
                b
            })
            .collect();
        let partition = match kind {
            ModelKind::Transformer => {
                let which = if r.random_bool(0.5) {
                    sag_core::models::SupervisedLayers::All
                } else {
                    sag_core::models::SupervisedLayers::Last
                };
                sag_core::models::select_supervised_heads(arch.layers, arch.heads, 0.5, which).unwrap()
            }
            ModelKind::Mil => HeadPartition { hg: vec![(0, 0)], tg: vec![(0, 0)] },
        };
        let opts = SagLossOptions {
            mse_target: if r.random_bool(0.5) {
                sag_core::losses::MseTarget::PerHead
            } else {
                sag_core::losses::MseTarget::HeadMean
            },
            shift_inout: r.random_bool(0.5),
        };
        Self { model, params, bags, partition, opts }
    }

    pub fn terms(&self, params: &ModelParams) -> SagTerms {
        let fwd = self.model.forward(params, &self.bags).unwrap();
        let guidance: Vec<ScaleGuidance> = self
            .bags
            .iter()
            .map(|b| ScaleGuidance { tg: b.guidance.tg.as_ref(), hg: b.guidance.hg.as_ref() })
            .collect();
        sag_terms(fwd.logits.view(), self.bags[0].label, &fwd.attention, &guidance, &self.partition, self.opts).unwrap()
    }

    pub fn log_vars(&self, params: &ModelParams) -> [f64; 3] {
        let v = self.model.layout.log_vars.vec(params.as_flat());
        [v[0], v[1], v[2]]
    }
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst per-coordinate relative error between analytic and central
/// finite-difference gradients for `[cls, mse, inout, total]`; `None` where
/// the loss is inactive for the case.
pub fn gradient_errors(case: &GradCase, h: f64) -> [Option<f64>; 4] {
    let n = case.params.len();
    let base = case.terms(&case.params);
    let fwd = case.model.forward(&case.params, &case.bags).unwrap();
    let zero_logits = ndarray::Array1::zeros(base.grad_cls.len());
    let empty = Default::default();
    let mut analytic = vec![vec![0.0; n]; 4];
    case.model.backward(&case.params, &case.bags, &fwd, base.grad_cls.view(), &empty, &mut analytic[0]);
    case.model.backward(&case.params, &case.bags, &fwd, zero_logits.view(), &base.grad_mse, &mut analytic[1]);
    case.model.backward(&case.params, &case.bags, &fwd, zero_logits.view(), &base.grad_inout, &mut analytic[2]);
    let (_, g) = base.combine(case.log_vars(&case.params)).unwrap();
    case.model.backward(&case.params, &case.bags, &fwd, g.d_logits.view(), &g.d_attention, &mut analytic[3]);
    for (slot, d) in case.model.layout.log_vars.range().zip(g.d_log_vars) {
        analytic[3][slot] += d;
    }

    let values = |p: &ModelParams| -> [f64; 4] {
        let t = case.terms(p);
        let total = t.combine(case.log_vars(p)).unwrap().0.weighted_total;
        [t.l_cls, t.l_mse.unwrap_or(0.0), t.l_inout.unwrap_or(0.0), total]
    };
    let mut worst = [0.0f64; 4];
    let mut probe = case.params.clone();
    for j in 0..n {
        let x = probe.values[j];
        probe.values[j] = x + h;
        let up = values(&probe);
        probe.values[j] = x - h;
        let down = values(&probe);
        probe.values[j] = x;
        for k in 0..4 {
            let numeric = (up[k] - down[k]) / (2.0 * h);
            worst[k] = worst[k].max(rel_err(analytic[k][j], numeric));
        }
    }
    [
        Some(worst[0]),
        base.l_mse.map(|_| worst[1]),
        base.l_inout.map(|_| worst[2]),
        Some(worst[3]),
    ]
}

/// Up to `n_max` points on a coarse lattice, so distance ties and
/// duplicates occur.
pub fn random_points(r: &mut ChaCha8Rng, n_max: usize) -> Vec<(f64, f64)> {
    let n = r.random_range(0..=n_max);
    let step = [0.5, 1.0, 2.5][r.random_range(0..3)];
    (0..n).map(|_| (r.random_range(0..12) as f64 * step, r.random_range(0..12) as f64 * step)).collect()
}

pub fn dbscan_matches(points: &[(f64, f64)], eps: f64, min_samples: usize) -> Result<(), String> {
    let got = sag_core::guidance::dbscan(&sag_core::guidance::PointSet { points: points.to_vec() }, eps, min_samples)
        .map_err(|e| e.to_string())?;
    let want = dbscan_reference(points, eps, min_samples);
    if got.labels == want {
        Ok(())
    } else {
        Err(format!("eps {eps} min {min_samples} points {points:?}: got {:?} want {want:?}", got.labels))
    }
}

pub fn random_histogram(r: &mut ChaCha8Rng) -> Vec<u64> {
    let levels = r.random_range(2..=64);
    let density = r.random_range(0.05..1.0);
    (0..levels).map(|_| if r.random_bool(density) { r.random_range(0..50) } else { 0 }).collect()
}

fn between_class_variance(hist: &[u64], t: usize) -> f64 {
    let total: u64 = hist.iter().sum();
    let (lo, hi) = hist.split_at(t);
    let (w0, w1) = (lo.iter().sum::<u64>(), hi.iter().sum::<u64>());
    if w0 == 0 || w1 == 0 {
        return 0.0;
    }
    let m0 = lo.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum::<f64>() / w0 as f64;
    let m1 = hi.iter().enumerate().map(|(v, &c)| (v + t) as f64 * c as f64).sum::<f64>() / w1 as f64;
    (w0 as f64 / total as f64) * (w1 as f64 / total as f64) * (m0 - m1).powi(2)
}

/// The chosen threshold must attain the exhaustive maximum of the
/// between-class variance (relative 1e-10).
pub fn otsu_matches(hist: &[u64]) -> Result<(), String> {
    let got = sag_core::guidance::otsu_from_histogram(hist);
    match otsu_reference(hist) {
        None if got.degenerate => Ok(()),
        None => Err(format!("{hist:?}: expected degenerate, got {got:?}")),
        Some(want) => {
            let best = between_class_variance(hist, want as usize);
            let at = between_class_variance(hist, got.threshold as usize);
            if !got.degenerate && at >= best * (1.0 - 1e-10) {
                Ok(())
            } else {
                Err(format!("{hist:?}: got {got:?} (variance {at}), want {want} (variance {best})"))
            }
        }
    }
}

/// Containment of every input point, strict convexity in counterclockwise
/// order, vertices drawn from the input, and idempotence.
pub fn hull_holds(points: &[(f64, f64)]) -> Result<(), String> {
    use sag_core::guidance::convex_hull;
    let hull = convex_hull(points);
    let v = &hull.vertices;
    if points.is_empty() != v.is_empty() {
        return Err(format!("{points:?}: hull {v:?}"));
    }
    if let Some(p) = points.iter().find(|&&p| !hull.contains(p, 1e-9)) {
        return Err(format!("{points:?}: hull {v:?} misses {p:?}"));
    }
    if let Some(q) = v.iter().find(|q| !points.contains(q)) {
        return Err(format!("{points:?}: vertex {q:?} not an input point"));
    }
    if v.len() >= 3 {
        for i in 0..v.len() {
            let (a, b, c) = (v[i], v[(i + 1) % v.len()], v[(i + 2) % v.len()]);
            let turn = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
            if turn <= 0.0 {
                return Err(format!("{points:?}: hull {v:?} not strictly convex at {b:?}"));
            }
        }
    }
    let again = convex_hull(v);
    let canon = |w: &[(f64, f64)]| {
        let mut w = w.to_vec();
        w.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        w
    };
    if canon(&again.vertices) != canon(v) {
        return Err(format!("{points:?}: hull of hull {:?} != {v:?}", again.vertices));
    }
    Ok(())
}

/// Random ratios in `[0, 1]`, roughly a third of them exactly zero.
pub fn random_ratios(r: &mut ChaCha8Rng) -> Vec<f64> {
    let p = r.random_range(1..=64);
    (0..p).map(|_| if r.random_bool(0.35) { 0.0 } else { r.random_range(0.0..=1.0) }).collect()
}

/// Simplex contract of guidance weights on one ratio vector.
pub fn simplex_holds(ratios: &[f64], scale: f64) -> Result<(), String> {
    let grid = PatchGrid::new(1, ratios.len(), 1).unwrap();
    let w = guidance_weights(&MaskAreaRatios { values: ratios.to_vec() }, GuidanceKind::Heuristic, grid).map_err(|e| e.to_string())?;
    let all_zero = ratios.iter().all(|&x| x == 0.0);
    if w.degenerate != all_zero {
        return Err(format!("{ratios:?}: degenerate flag {}", w.degenerate));
    }
    if w.weights.iter().any(|&x| !(x >= 0.0)) {
        return Err(format!("{ratios:?}: negative weight"));
    }
    let sum: f64 = w.weights.iter().sum();
    if !all_zero && (sum - 1.0).abs() > 1e-9 {
        return Err(format!("{ratios:?}: weights sum to {sum}"));
    }
    if ratios.iter().zip(&w.weights).any(|(&x, &y)| (x == 0.0) != (y == 0.0)) {
        return Err(format!("{ratios:?}: zero pattern not preserved"));
    }
    let scaled: Vec<f64> = ratios.iter().map(|x| x * scale).collect();
    let ws = guidance_weights(&MaskAreaRatios { values: scaled }, GuidanceKind::Heuristic, grid).map_err(|e| e.to_string())?;
    if let Some((a, b)) = w.weights.iter().zip(&ws.weights).find(|(a, b)| (*a - *b).abs() > 1e-12) {
        return Err(format!("{ratios:?}: scaling by {scale} moved {a} to {b}"));
    }
    Ok(())
}

/// Random simplex vector of length `p` with some exact zeros.
pub fn random_simplex(r: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..p).map(|_| if r.random_bool(0.2) { 0.0 } else { r.random_range(0.0..1.0) }).collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// `loss_inout` against `(2 * outside mass - 1) / p`.
pub fn inout_identity_error(r: &mut ChaCha8Rng) -> f64 {
    let p = r.random_range(1..=64);
    let ma = random_simplex(r, p);
    let tg: Vec<f64> = (0..p).map(|_| if r.random_bool(0.5) { r.random_range(0.01..1.0) } else { 0.0 }).collect();
    let outside: f64 = ma.iter().zip(&tg).filter(|(_, &t)| t == 0.0).map(|(m, _)| m).sum();
    let got = sag_core::losses::loss_inout(&tg, &ma).unwrap();
    (got - (2.0 * outside - 1.0) / p as f64).abs()
}
