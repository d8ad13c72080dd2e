use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sag_core::pgm::Pgm;
use sag_core::synth::store::{read_manifest, GUIDANCE_DIR, MANIFEST};

const SMALL: [&str; 4] = ["--override", "n_train=12", "n_val=4", "n_test=6"];

fn sag(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sag"))
        .args(args)
        .env("SAG_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn sag")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = sag(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn gen_small(out: &Path, extra: &[&str]) {
    ok(out, &[&["gen-data"][..], &SMALL, extra].concat());
}

#[test]
fn gen_data_is_reproducible_and_refuses_to_overwrite() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen_small(&a, &[]);
    gen_small(&b, &[]);
    let read = |p: &Path| fs::read(p.join("data").join(MANIFEST)).unwrap();
    assert_eq!(read(&a), read(&b));

    let again = sag(&a, &[&["gen-data"][..], &SMALL].concat());
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));

    gen_small(&a, &["--force", "--seed", "5"]);
    let m = read_manifest(&a.join("data")).unwrap();
    assert_eq!(m.seed, 5);
    assert_ne!(read(&a), read(&b));
}

#[test]
fn size_overrides_reach_the_manifest() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["gen-data", "--override", "n_train=89", "n_val=22", "n_test=111"]);
    let m = read_manifest(&t.path().join("data")).unwrap();
    assert_eq!((m.sizes.n_train, m.sizes.n_val, m.sizes.n_test), (89, 22, 111));
    assert_eq!(m.slides.len(), 222);
}

#[test]
fn bad_override_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let o = sag(t.path(), &["gen-data", "--override", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!t.path().join("data").join(MANIFEST).exists());
}

#[test]
fn guidance_train_eval_render_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path();
    gen_small(out, &["scales=2"]);
    let data = out.join("data");
    let m = read_manifest(&data).unwrap();

    ok(out, &["build-guidance", "--kind", "both"]);
    let names: Vec<String> =
        fs::read_dir(data.join(GUIDANCE_DIR)).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    let per_slide = names.iter().filter(|n| n.ends_with(".tg.json") || n.ends_with(".hg.json")).count();
    assert_eq!(per_slide, m.slides.len() * m.spec.scales * 2);

    let train = ["train", "--seed", "3", "--override", "epochs=2", "use_hg=true", "model.layers=1", "model.heads=2"];
    let stdout = ok(out, &train);
    assert!(stdout.starts_with("1 seeds:"), "{stdout}");
    let ckpt = out.join("train/checkpoints/seed-3.ckpt");
    assert!(ckpt.exists());
    let lines = fs::read_to_string(out.join("train/metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    assert_eq!(sag(out, &train).status.code(), Some(1), "train output is protected without --force");

    let ck = ckpt.to_str().unwrap();
    ok(out, &["eval", "--checkpoint", ck, "--split", "val"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("eval/report.json")).unwrap()).unwrap();
    let acc = report["mean"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let id = &m.slides[0].id;
    ok(out, &["render-attention", "--checkpoint", ck, "--slide", id]);
    let image = |tag: &str| Pgm::read(&out.join("render").join(format!("{id}.{tag}.pgm"))).unwrap();
    let (att, guide, side) = (image("attention"), image("guidance"), image("side"));
    let g = m.spec.grid;
    assert_eq!((att.width, att.height), (g.cols * g.patch_edge, g.rows * g.patch_edge));
    assert_eq!((guide.width, guide.height), (att.width, att.height));
    assert_eq!(side.height, att.height);
    assert!(side.width > 2 * att.width);
    let missing = sag(out, &["render-attention", "--checkpoint", ck, "--slide", "nope"]);
    assert_eq!(missing.status.code(), Some(1));
}
