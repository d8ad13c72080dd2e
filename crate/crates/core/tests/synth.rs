use sag_core::grid::patchify;
use sag_core::guidance::{build_hg, mask_guidance, tissue_mask, GuidanceKind, HgParams, TissuePolarity};
use sag_core::models::features::INTENSITY_CHANNELS;
use sag_core::synth::{generate_dataset, generate_slide, CellParams, LabeledSlide, LesionParams, SlideSpec, SplitSizes};

fn lesion_patches(s: &LabeledSlide, spec: &SlideSpec) -> Vec<bool> {
    patchify(&s.truth.lesion, &spec.grid).unwrap().values.iter().map(|&v| v > 0.0).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Reads the class planes averaged over the truth lesion patches.
fn bayes_oracle(s: &LabeledSlide, spec: &SlideSpec) -> usize {
    let lesion = lesion_patches(s, spec);
    let f = &s.bags[0].features;
    let mut score = vec![0.0; spec.num_classes];
    for (i, _) in lesion.iter().enumerate().filter(|(_, &on)| on) {
        for (c, sc) in score.iter_mut().enumerate() {
            *sc += f[[i, INTENSITY_CHANNELS + c]];
        }
    }
    (0..spec.num_classes).max_by(|&a, &b| score[a].total_cmp(&score[b])).unwrap()
}

#[test]
fn hg_matches_lesions_without_background_cells() {
    let spec = SlideSpec { cells: CellParams { lambda_out: 0.0, ..CellParams::default() }, ..SlideSpec::default() };
    let mut total = 0.0;
    for seed in 0..100 {
        let s = generate_slide(&spec, seed, (seed % 4) as usize).unwrap();
        let hg = build_hg(&s.truth.cells, &spec.grid, HgParams::default()).unwrap();
        let truth = lesion_patches(&s, &spec);
        let inter = hg.weights.iter().zip(&truth).filter(|(w, &t)| **w > 0.0 && t).count();
        let union = hg.weights.iter().zip(&truth).filter(|(w, &t)| **w > 0.0 || t).count();
        total += inter as f64 / union as f64;
    }
    let mean = total / 100.0;
    assert!(mean >= 0.8, "mean Jaccard {mean}");
}

#[test]
fn hg_correlates_with_truth_lesion_weights() {
    let spec = SlideSpec::default();
    let mut total = 0.0;
    for seed in 0..100 {
        let s = generate_slide(&spec, 1000 + seed, (seed % 4) as usize).unwrap();
        let hg = build_hg(&s.truth.cells, &spec.grid, HgParams::default()).unwrap();
        let truth = mask_guidance(&s.truth.lesion, &spec.grid, GuidanceKind::Heuristic).unwrap();
        total += cosine(&hg.weights, &truth.weights);
    }
    let mean = total / 100.0;
    assert!(mean >= 0.7, "mean cosine {mean}");
}

#[test]
fn otsu_recovers_tissue() {
    let spec = SlideSpec::default();
    for seed in 0..30 {
        let s = generate_slide(&spec, 500 + seed, 0).unwrap();
        let tm = tissue_mask(&s.gray, &spec.grid, TissuePolarity::Darker).unwrap();
        let iou = tm.mask.iou(&s.truth.tissue);
        assert!(iou >= 0.95, "seed {seed}: IoU {iou}");
    }
}

#[test]
fn label_recoverable_from_lesion_features() {
    let spec = SlideSpec::default();
    let ds = generate_dataset(&spec, SplitSizes { n_train: 200, n_val: 1, n_test: 1 }, 17).unwrap();
    let hits = ds.train.iter().filter(|s| bayes_oracle(s, &spec) == s.label).count();
    assert!(hits as f64 / 200.0 >= 0.95, "oracle accuracy {}", hits as f64 / 200.0);
}

#[test]
fn zero_contrast_is_chance() {
    let spec = SlideSpec { lesion: LesionParams { delta: 0.0, ..LesionParams::default() }, ..SlideSpec::default() };
    let ds = generate_dataset(&spec, SplitSizes { n_train: 400, n_val: 1, n_test: 1 }, 5).unwrap();
    let acc = ds.train.iter().filter(|s| bayes_oracle(s, &spec) == s.label).count() as f64 / 400.0;
    assert!((acc - 0.25).abs() < 0.08, "oracle accuracy {acc} at zero contrast");
}

#[test]
fn lesion_signal_only_in_lesion_patches() {
    let spec = SlideSpec { feature_noise: 0.0, ..SlideSpec::default() };
    let s = generate_slide(&spec, 8, 3).unwrap();
    let lesion = lesion_patches(&s, &spec);
    let f = &s.bags[0].features;
    for (i, &on) in lesion.iter().enumerate() {
        let v = f[[i, INTENSITY_CHANNELS + 3]];
        if on {
            assert!((v - spec.lesion.delta).abs() < 1e-6, "{v}");
        } else if !s.truth.distractors.contains(&i) {
            assert_eq!(v, 0.0);
        }
    }
}

#[test]
fn uneven_two_class_splits() {
    let spec = SlideSpec { num_classes: 2, ..SlideSpec::default() };
    let ds = generate_dataset(&spec, SplitSizes { n_train: 89, n_val: 22, n_test: 111 }, 1).unwrap();
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (89, 22, 111));
    assert!(ds.test.iter().all(|s| s.label < 2));
    let mut ids: Vec<&str> = ds.train.iter().chain(&ds.val).chain(&ds.test).map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 222);
}
