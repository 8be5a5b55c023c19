use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vqdetect::detector::ThresholdSet;
use vqdetect::raster::{load_tile, DatasetManifest, Label};

const TINY: &str = "\
[experiment]
seed = 5
tile_size = 16
channels = 3
far = 0.1
score_batch = 8

[dataset a]
texture = lc
family = checkerboard
strength = 0.8
pristine_train_oneclass = 8
pristine_train_detector = 8
generated_train_detector = 8
pristine_calibrate = 10
generated_test = 10

[dataset b]
texture = scand
family = spectral_smoothing
strength = 0.5
pristine_train_detector = 8
generated_train_detector = 8
pristine_calibrate = 10
generated_test = 10

[vqvae]
max_epochs = 2
batch_size = 4
learning_rate = 0.002
train_sets = a

[baseline]
max_epochs = 2
batch_size = 8
width = 4
depth = 1
train_sets = a, a+b

[evaluate]
cross_test = a, b
unseen = b
unseen_baseline = a
scatter = a
";

fn vqdetect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqdetect"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup(dir: &Path, text: &str) -> (String, String) {
    let cfg = dir.join("tiny.conf");
    fs::write(&cfg, text).unwrap();
    (cfg.display().to_string(), dir.join("out").display().to_string())
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

const PIPELINE: [&str; 7] = ["synth", "train-vqvae", "train-baseline", "calibrate", "detect", "evaluate", "report"];

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn pipeline_runs_end_to_end_and_repeats_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), TINY);
    for cmd in PIPELINE {
        ok(vqdetect(&[cmd, "--config", &cfg, "--out", &out]));
    }
    let out_path = Path::new(&out);
    for band in ["B2", "B3", "B4"] {
        assert!(out_path.join(format!("models/vqvae/a/{band}.ckpt")).exists());
    }
    assert!(out_path.join("models/baseline/a+b/cnn.ckpt").exists());
    assert!(out_path.join("reports/scatter_a.svg").exists());
    let table = fs::read_to_string(out_path.join("reports/results.tsv")).unwrap();
    // cross test: 1 one-class set × 2 test sets × (3 bands + total) plus
    // 2 baseline sets × 2 test sets; unseen: 3 bands + baseline
    assert_eq!(table.lines().count() - 1, 8 + 4 + 4);
    assert!(fs::read_to_string(out_path.join("echo/evaluate.conf")).unwrap().contains("far = 0.1"));

    let first = snapshot(out_path);
    for cmd in PIPELINE {
        ok(vqdetect(&[cmd, "--config", &cfg, "--out", &out, "--force"]));
    }
    let second = snapshot(out_path);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (path, bytes) in &first {
        assert!(bytes == &second[path], "{} differs between reruns", path.display());
    }
}

#[test]
fn synth_is_idempotent_and_guards_names() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), TINY);
    ok(vqdetect(&["synth", "--config", &cfg, "--out", &out]));
    let manifest = DatasetManifest::load(Path::new(&out).join("data/a.manifest")).unwrap();
    assert_eq!(manifest.entries.len(), 8 + 8 + 8 + 10 + 10);
    let before = snapshot(&Path::new(&out).join("data"));
    let notice = ok(vqdetect(&["synth", "--config", &cfg, "--out", &out]));
    assert!(notice.contains("skipping"));
    assert_eq!(before, snapshot(&Path::new(&out).join("data")));
    // same name, different content, no --force
    let code = vqdetect(&["synth", "--config", &cfg, "--out", &out, "--seed", "6"]).status.code();
    assert_eq!(code, Some(2));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), TINY);
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "[experiment]\nsede = 1\n").unwrap();
    let bad = bad.display().to_string();
    assert_eq!(vqdetect(&["synth", "--config", &bad]).status.code(), Some(2));
    assert_eq!(vqdetect(&["synth", "--config", "/nonexistent.conf"]).status.code(), Some(3));
    ok(vqdetect(&["synth", "--config", &cfg, "--out", &out]));
    // no checkpoints trained yet
    assert_eq!(vqdetect(&["evaluate", "--config", &cfg, "--out", &out]).status.code(), Some(3));
    assert_eq!(vqdetect(&["report", "--config", &cfg, "--out", &out]).status.code(), Some(3));
}

#[test]
fn far_flag_reaches_thresholds_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("train_sets = a, a+b", "train_sets = a");
    let (cfg, out) = setup(dir.path(), &text);
    for cmd in ["synth", "train-vqvae", "train-baseline"] {
        ok(vqdetect(&[cmd, "--config", &cfg, "--out", &out]));
    }
    for cmd in ["calibrate", "evaluate"] {
        ok(vqdetect(&[cmd, "--config", &cfg, "--out", &out, "--far", "0.05"]));
    }
    let th = ThresholdSet::load(Path::new(&out).join("thresholds/a__b.thresholds")).unwrap();
    assert_eq!(th.target_far, 0.05);
    let table = fs::read_to_string(Path::new(&out).join("reports/results.tsv")).unwrap();
    assert!(table.lines().skip(1).all(|l| l.split('\t').nth(4) == Some("0.05")));
}

fn write_raw(path: &Path, side: usize, value: u16) {
    let bytes: Vec<u8> = (0..side * side).flat_map(|i| (value + (i % 7) as u16).to_le_bytes()).collect();
    fs::write(path, bytes).unwrap();
}

#[test]
fn ingest_composes_upsample_retile_filter() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // 10 m, 20 m and 60 m bands over the same 1920 m footprint
    write_raw(&d.join("b4.raw"), 192, 100);
    write_raw(&d.join("b5.raw"), 96, 200);
    write_raw(&d.join("b1.raw"), 32, 300);
    fs::write(d.join("s.scene"), "label = pristine\n[bands]\nB4 = b4.raw\nB5 = b5.raw\nB1 = b1.raw\n").unwrap();
    let out = d.join("out").display().to_string();
    let scene = d.join("s.scene").display().to_string();
    ok(vqdetect(&["ingest", "--name", "real", "--out", &out, "--tile-size", "64", &scene]));
    let m = DatasetManifest::load(d.join("out/data/real.manifest")).unwrap();
    assert_eq!(m.entries.len(), 9);
    let t = load_tile(d.join("out/data").join(&m.entries[0].locator)).unwrap();
    assert_eq!((t.height, t.width), (64, 64));
    let names: Vec<&str> = t.bands.iter().map(|b| b.name()).collect();
    assert_eq!(names, ["B1", "B4", "B5"]);
    assert!(t.bands.iter().all(|b| b.effective_gsd == 10.0));

    // existing name without --force
    assert_eq!(
        vqdetect(&["ingest", "--name", "real", "--out", &out, &scene]).status.code(),
        Some(2)
    );
    // 20 m band covering a different footprint
    write_raw(&d.join("b5.raw"), 90, 200);
    let code = vqdetect(&["ingest", "--name", "bad", "--out", &out, &scene]).status.code();
    assert_eq!(code, Some(4));
}

#[test]
fn ingest_label_comes_from_scene_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_raw(&d.join("b4.raw"), 128, 50);
    fs::write(d.join("g.scene"), "label = generated\n[bands]\nB4 = b4.raw\n").unwrap();
    let out = d.join("out").display().to_string();
    let scene = d.join("g.scene").display().to_string();
    ok(vqdetect(&["ingest", "--name", "own", "--out", &out, "--tile-size", "64", &scene]));
    ok(vqdetect(&["ingest", "--name", "forced", "--out", &out, "--tile-size", "64", "--label", "pristine", &scene]));
    let labels = |name: &str| -> Vec<Label> {
        let m = DatasetManifest::load(d.join(format!("out/data/{name}.manifest"))).unwrap();
        m.entries.iter().map(|e| e.label).collect()
    };
    assert_eq!(labels("own"), vec![Label::Generated; 4]);
    assert_eq!(labels("forced"), vec![Label::Pristine; 4]);
}
