use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ale::data::{load_ply, save_ply, Manifest, PlyFormat, Split};
use ale::pipeline::read_history;

fn ale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ale")).args(args).env_remove("ALE_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ale(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ale(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_DATA: [&str; 6] = ["--set", "motion.sequences=4", "--set", "motion.frames_per_sequence=2", "--set", "points_per_scan=600"];

fn synth_small(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["synth", "--out", s(&out)];
    args.extend(SMALL_DATA);
    ok(&args);
    out.join("manifest.json")
}

fn write_train_config(dir: &Path, manifest: &Path) -> PathBuf {
    let path = dir.join("train.toml");
    let text = format!(
        "manifest = {:?}\nepochs = 3\nbatch_size = 3\nlearning_rate = 1e-3\n\n[model]\nfeature_dim = 4\nencoder_channels = [4, 4]\nhidden = 8\n",
        s(manifest)
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn read_dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap())).collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn synth_is_deterministic_and_splits_sequences() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth_small(&tmp.path().join("a"));
    let b = synth_small(&tmp.path().join("b"));
    assert_eq!(read_dir_bytes(a.parent().unwrap()), read_dir_bytes(b.parent().unwrap()));
    let m = Manifest::load(&a).unwrap();
    assert_eq!(m.count(Split::Train).1 + m.count(Split::Test).1, 8);

    let out = tmp.path().join("ten");
    ok(&["synth", "--out", s(&out), "--set", "motion.sequences=10", "--set", "motion.frames_per_sequence=1", "--set", "points_per_scan=100"]);
    let m = Manifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!((m.count(Split::Train).0, m.count(Split::Test).0), (7, 3));
    assert_eq!(m.split_ratio, 0.7);
}

#[test]
fn config_and_io_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&["synth", "--out", s(&out), "--set", "motion.nope=1"]), 2);
    assert_eq!(code(&["synth", "--out", s(&out), "--set", "split_ratio=1.5"]), 2);
    assert_eq!(code(&["synth", "--config", s(&tmp.path().join("missing.toml"))]), 1);
    // a regular file where a directory is needed
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let mut args = vec!["synth", "--out", s(&blocker)];
    args.extend(SMALL_DATA);
    assert_eq!(code(&args), 1);
    assert_eq!(code(&["train", "--out", s(&out)]), 2);
    assert_eq!(code(&["bogus"]), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_ale")).args(["eval"]).env("ALE_THREADS", "0").output().unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_small(tmp.path());
    let cfg = write_train_config(tmp.path(), &manifest);
    let run_a = tmp.path().join("run_a");
    let run_b = tmp.path().join("run_b");
    for run in [&run_a, &run_b] {
        ok(&["train", "--config", s(&cfg), "--set", "epochs=2", "--out", s(run)]);
    }
    let history = read_history(&run_a.join("history.tsv")).unwrap();
    assert_eq!(history.iter().map(|r| r.epoch).max(), Some(1));
    let ckpt = run_a.join("checkpoint.alec");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(run_b.join("checkpoint.alec")).unwrap());
    assert_eq!(std::fs::read(run_a.join("history.tsv")).unwrap(), std::fs::read(run_b.join("history.tsv")).unwrap());

    // the fixed grid gives K * M = 798 * 16 points
    let infer = tmp.path().join("infer");
    ok(&["infer", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&infer)]);
    let plys = walk(&infer);
    assert!(!plys.is_empty());
    for p in &plys {
        let scan = load_ply::<f32>(p).unwrap();
        assert_eq!(scan.len(), 12_768);
        assert!(scan.normals.iter().all(|n| ((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-5));
        assert!(scan.colors.is_some());
    }

    // doubling the density doubles the count up to per-patch rounding
    let pose_file = manifest.parent().unwrap().join("poses/seq000.json");
    let count = |density: &str| {
        let dir = tmp.path().join(format!("dense{density}"));
        ok(&["infer", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--poses", s(&pose_file), "--density", density, "--out", s(&dir)]);
        load_ply::<f32>(&dir.join("seq000_0000.ply")).unwrap().len() as i64
    };
    let (one, two) = (count("20000"), count("40000"));
    assert!((two - 2 * one).abs() <= 798, "{one} vs {two}");

    let report_dir = tmp.path().join("eval");
    let text = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&report_dir)]);
    assert!(text.contains("Chamfer-L2 (×1e-4 m²)") && text.contains("Normal diff (×1e-1)"), "{text}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(report_dir.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["repeats"], 3);
    assert_eq!(report["seeds"].as_array().unwrap().len(), 3);

    // a manifest without test sequences cannot be evaluated
    let mut m = Manifest::load(&manifest).unwrap();
    m.sequences.retain(|e| e.split == Split::Train);
    let train_only = manifest.parent().unwrap().join("train_only.json");
    m.save(&train_only).unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&train_only), "--out", s(&report_dir)]), 2);

    // a checkpoint for another chart size does not fit this body
    let big = tmp.path().join("big");
    let mut args = vec!["synth", "--out", s(&big), "--set", "body.uv_resolution=64"];
    args.extend(SMALL_DATA);
    ok(&args);
    let big_manifest = big.join("manifest.json");
    assert_eq!(code(&["infer", "--checkpoint", s(&ckpt), "--manifest", s(&big_manifest), "--out", s(&infer)]), 2);
}

#[test]
fn ablation_flag_and_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_small(tmp.path());
    let cfg = write_train_config(tmp.path(), &manifest);
    let run = tmp.path().join("noart");
    ok(&["train", "--config", s(&cfg), "--set", "epochs=1", "--set", "model.use_articulation=false", "--out", s(&run)]);
    let saved = std::fs::read_to_string(run.join("train_config.toml")).unwrap();
    assert!(saved.contains("use_articulation = false"));

    // a corrupted scan drives the loss to infinity
    let m = Manifest::load(&manifest).unwrap();
    let entry = m.sequences.iter().find(|e| e.split == Split::Train).unwrap();
    let ply = manifest.parent().unwrap().join(&entry.frames[0]);
    let mut scan = load_ply::<f32>(&ply).unwrap();
    scan.points.iter_mut().for_each(|p| p[0] = 3e38);
    save_ply(&scan, &ply, PlyFormat::BinaryLittleEndian).unwrap();
    let blow = tmp.path().join("blow");
    let out = ale(&["train", "--config", s(&cfg), "--out", s(&blow)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&entry.id));
}
