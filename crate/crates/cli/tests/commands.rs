use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pvo::tensor::{read_array, write_array};
use pvo::Tensor;

/// Options that keep training commands to a few seconds.
const QUICK: [&str; 10] = [
    "--set",
    "optimizer.steps=2",
    "--set",
    "data.train_scenes=1",
    "--set",
    "data.val_scenes=1",
    "--set",
    "data.lidar.n_beams=8",
    "--set",
    "data.lidar.points_per_beam=128",
];

fn pvo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvo")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = pvo(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

fn synth(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    ok(&["synth", "--scenes", &n.to_string(), "--seed", &seed.to_string(), "--out", name], dir);
    dir.join(name)
}

#[test]
fn synth_writes_four_files_per_scene_and_a_manifest() {
    let t = tempfile::tempdir().unwrap();
    let one = synth(t.path(), "one", 1, 5);
    assert_eq!(files(&one), ["camera_0000.arr", "cloud_0000.csv", "manifest.json", "scene_0000.json", "truth_0000.sem"]);
    let zero = synth(t.path(), "zero", 0, 5);
    assert_eq!(files(&zero), ["manifest.json"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(one.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let t = tempfile::tempdir().unwrap();
    let a = synth(t.path(), "a", 2, 9);
    let b = synth(t.path(), "b", 2, 9);
    let c = synth(t.path(), "c", 2, 10);
    for f in files(&a).iter().filter(|f| *f != "manifest.json") {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("cloud_0000.csv")).unwrap(), fs::read(c.join("cloud_0000.csv")).unwrap());
}

#[test]
fn oracle_run_scores_one() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "d", 2, 1);
    ok(&["run", "--data", "d", "--oracle", "--out", "r.json", "--confusion", "c.csv"], t.path());
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["iou"], 1.0);
    assert_eq!(r["miou"], 1.0);
    assert_eq!(r["bands"].as_array().unwrap().len(), 5);
    assert!(t.path().join("r.json.manifest.json").exists());
    let csv = fs::read_to_string(t.path().join("c.csv")).unwrap();
    assert!(csv.starts_with("truth\\pred,free,"));
}

#[test]
fn model_run_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "d", 1, 2);
    ok(&["run", "--data", "d", "--out", "a.json"], t.path());
    ok(&["run", "--data", "d", "--out", "b.json", "--threads", "1"], t.path());
    let a = fs::read(t.path().join("a.json")).unwrap();
    assert_eq!(a, fs::read(t.path().join("b.json")).unwrap());
    let r: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(r["miou"].as_f64().unwrap() < 1.0);
}

#[test]
fn missing_inputs_exit_with_code_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(pvo(&["run", "--data", "absent", "--out", "r.json"], t.path()).status.code(), Some(2));
    synth(t.path(), "d", 1, 1);
    let out = pvo(&["run", "--data", "d", "--checkpoint", "absent.bin", "--out", "r.json"], t.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(pvo(&["run", "--data", "d", "--config", "absent.json", "--out", "r.json"], t.path()).status.code(), Some(2));
    assert_eq!(pvo(&["resample", "--input", "absent.arr", "--out", "o.arr"], t.path()).status.code(), Some(2));
    fs::remove_file(t.path().join("d/cloud_0000.csv")).unwrap();
    assert_eq!(pvo(&["run", "--data", "d", "--out", "r.json"], t.path()).status.code(), Some(2));
}

#[test]
fn config_data_mismatch_names_the_key() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "d", 1, 1);
    let out = pvo(&["run", "--data", "d", "--out", "r.json", "--set", "n_classes=4"], t.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_classes"));

    let cfg = t.path().join("cfg.json");
    let mut c = pvo::pipeline::ModelConfig::desk();
    c.grid.output.bins = [32, 32, 10];
    c.save(&cfg).unwrap();
    let out = pvo(&["run", "--data", "d", "--out", "r.json", "--config", "cfg.json"], t.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid.output.bins"));

    let out = pvo(&["run", "--data", "d", "--out", "r.json", "--set", "fusion.mode=fused", "--set", "channels=4"], t.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`channels`"));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(pvo(&["frobnicate"], t.path()).status.code(), Some(2));
    assert_eq!(pvo(&["synth", "--scenes", "1"], t.path()).status.code(), Some(2));
    assert_eq!(pvo(&["synth", "--out", "x", "--set", "nonsense=1"], t.path()).status.code(), Some(2));
    assert_eq!(pvo(&["synth", "--out", "x", "--set", "channels"], t.path()).status.code(), Some(2));
    assert_eq!(pvo(&["synth", "--out", "x", "--threads", "0"], t.path()).status.code(), Some(2));
    assert_eq!(pvo(&["gradcheck", "--config", "cfg.json"], t.path()).status.code(), Some(2));
    pvo::pipeline::ModelConfig::desk().save(t.path().join("desk.json")).unwrap();
    assert_eq!(pvo(&["gradcheck", "--config", "desk.json"], t.path()).status.code(), Some(2));
}

#[test]
fn unwritable_output_fails() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("file"), b"x").unwrap();
    let out = pvo(&["synth", "--scenes", "1", "--out", "file/sub"], t.path());
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_exit_code_follows_the_report() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", "g.json"], t.path());
    let text = String::from_utf8_lossy(&out.stdout);
    for m in ["stem", "fusion", "backbone", "grp", "resample", "head", "loss", "pipeline"] {
        assert!(text.lines().any(|l| l.starts_with(m) && l.ends_with("PASS")), "{m}");
    }
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(r["passed"], true);
    let bad = pvo(&["gradcheck", "--corrupt", "grp.local.wv"], t.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("failing: grp.local.wv"));
}

#[test]
fn train_then_run_from_the_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    synth(p, "d", 1, 4);
    let mut args = vec!["train", "--data", "d", "--out", "a.bin", "--precision", "f32"];
    args.extend(QUICK);
    ok(&args, p);
    args[4] = "b.bin";
    ok(&args, p);
    for f in ["a.bin", "a.bin.names.json", "a.bin.log.jsonl"] {
        let g = f.replacen('a', "b", 1);
        assert_eq!(fs::read(p.join(f)).unwrap(), fs::read(p.join(g)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(p.join("a.bin.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    ok(&["run", "--data", "d", "--checkpoint", "a.bin", "--out", "r.json"], p);
    let cfg = t.path().join("tiny.json");
    pvo::pipeline::ModelConfig::tiny().save(&cfg).unwrap();
    let out = pvo(&["run", "--data", "d", "--checkpoint", "a.bin", "--out", "r.json", "--config", "tiny.json"], p);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_emits_the_five_row_table() {
    let t = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--seed", "3", "--out", "a.md", "--csv", "a.csv"];
    args.extend(QUICK);
    ok(&args, t.path());
    args[4] = "b.md";
    args[6] = "b.csv";
    ok(&args, t.path());
    let md = fs::read_to_string(t.path().join("a.md")).unwrap();
    assert_eq!(md, fs::read_to_string(t.path().join("b.md")).unwrap());
    assert_eq!(fs::read(t.path().join("a.csv")).unwrap(), fs::read(t.path().join("b.csv")).unwrap());
    assert!(md.starts_with("| Polar | GRP | PD-Conv | IoU | mIoU |"));
    assert_eq!(md.lines().skip(2).count(), 5);
    let csv = fs::read_to_string(t.path().join("a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn stats_reports_both_grids() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "d", 2, 6);
    ok(&["stats", "--data", "d", "--out", "a.json"], t.path());
    ok(&["stats", "--data", "d", "--out", "b.json"], t.path());
    let a = fs::read(t.path().join("a.json")).unwrap();
    assert_eq!(a, fs::read(t.path().join("b.json")).unwrap());
    let r: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(r["polar"]["bands"].as_array().unwrap().len(), 5);
    assert_eq!(r["cartesian"]["bands"].as_array().unwrap().len(), 5);
    assert_eq!(r["range_miou"].as_array().unwrap().len(), 5);
    assert!(r["polar"]["spread"].as_f64().unwrap() >= 1.0);
}

#[test]
fn resample_converts_a_polar_volume() {
    let t = tempfile::tempdir().unwrap();
    let cfg = pvo::pipeline::ModelConfig::desk();
    let [r, a, z] = cfg.grid.polar.bins;
    // a field that is constant per voxel column resamples to the same constant
    let vol = Tensor::<f64>::from_fn(&[r, a, z, 2], |i| if i % 2 == 0 { 1.5 } else { -2.0 });
    write_array(t.path().join("v.arr"), &vol).unwrap();
    ok(&["resample", "--input", "v.arr", "--out", "o.arr"], t.path());
    let out: Tensor<f64> = read_array(t.path().join("o.arr")).unwrap();
    assert_eq!(out.shape(), &[64, 64, 10, 2]);
    for pair in out.data().chunks(2) {
        assert!((pair[0] - 1.5).abs() < 1e-12 && (pair[1] + 2.0).abs() < 1e-12);
    }
    write_array(t.path().join("w.arr"), &Tensor::<f64>::zeros(&[3, 3, 3, 1])).unwrap();
    assert_eq!(pvo(&["resample", "--input", "w.arr", "--out", "o.arr"], t.path()).status.code(), Some(2));
}
