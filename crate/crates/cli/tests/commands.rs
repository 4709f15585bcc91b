use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn acelora(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acelora"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

#[track_caller]
fn ok(args: &[&str], cwd: &Path) -> String {
    let out = acelora(args, cwd);
    assert!(
        out.status.success(),
        "acelora {args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn record_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).count()
}

/// Synthesizes the quick dataset with splits into `dir/data`.
fn quick_data(dir: &Path) -> PathBuf {
    let quick = config("quick.toml");
    ok(&["synth", "--config", quick.to_str().unwrap(), "--split", "--out", "data"], dir);
    dir.join("data")
}

#[test]
fn synth_is_deterministic_and_splits_stratified() {
    let dir = tempfile::tempdir().unwrap();
    let quick = config("quick.toml");
    let q = quick.to_str().unwrap();
    ok(&["synth", "--config", q, "--split", "--out", "a"], dir.path());
    ok(&["synth", "--config", q, "--split", "--out", "b"], dir.path());
    ok(&["synth", "--config", q, "--seed", "1", "--out", "c"], dir.path());
    let (a, b, c) = (manifest(&dir.path().join("a")), manifest(&dir.path().join("b")), manifest(&dir.path().join("c")));
    assert_eq!(a["outputs"], b["outputs"]);
    assert_ne!(a["outputs"]["dataset.txt"], c["outputs"]["dataset.txt"]);
    assert_eq!(a["dataset_hash"], a["outputs"]["dataset.txt"]);

    let d = dir.path().join("a");
    let total = record_count(&d.join("dataset.txt"));
    // quick.toml: 3 classes of 12 pairs.
    assert_eq!(total, 36);
    let parts: Vec<usize> = ["train.txt", "val.txt", "test.txt"].iter().map(|n| record_count(&d.join(n))).collect();
    assert_eq!(parts.iter().sum::<usize>(), total);
    assert!(parts.iter().all(|&n| n > 0), "{parts:?}");
    assert!(parts[0] > parts[1] && parts[0] > parts[2]);
}

#[test]
fn train_eval_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = quick_data(dir.path());
    let quick = config("quick.toml");
    let train = data.join("train.txt");
    let test = data.join("test.txt");
    ok(
        &["train", "--config", quick.to_str().unwrap(), "--data", train.to_str().unwrap(), "--out", "run"],
        dir.path(),
    );
    let run = dir.path().join("run");
    let m = manifest(&run);
    assert_eq!(m["command"], "train");
    assert!(m["config"].as_str().unwrap().contains("epochs = 4"));
    assert_eq!(fs::read_to_string(run.join("epochs.log")).unwrap().lines().count(), 4);

    let summary = ok(
        &["eval", "--checkpoint", "run/checkpoint.acel", "--data", test.to_str().unwrap(), "--out", "eval"],
        dir.path(),
    );
    assert!(summary.contains("acc"), "{summary}");
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["num_classes"], 3);
    assert_eq!(report["scores"].as_array().unwrap().len(), record_count(&test));

    // Replay from another working directory reproduces every output.
    let elsewhere = tempfile::tempdir().unwrap();
    let replay_out = elsewhere.path().join("again");
    let msg = ok(
        &["replay", run.join("manifest.json").to_str().unwrap(), "--out", replay_out.to_str().unwrap()],
        elsewhere.path(),
    );
    assert!(msg.contains("replay matches"), "{msg}");
    assert_eq!(manifest(&replay_out)["outputs"], m["outputs"]);

    // A manifest whose recorded hash no longer matches is reported.
    let mut tampered = m.clone();
    tampered["outputs"]["epochs.log"] = Value::String("0".repeat(64));
    fs::write(dir.path().join("tampered.json"), tampered.to_string()).unwrap();
    let out = acelora(&["replay", "tampered.json", "--out", "again"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs.log"));
}

#[test]
fn interrupted_and_resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let data = quick_data(dir.path());
    let quick = config("quick.toml");
    let (q, train) = (quick.to_str().unwrap(), data.join("train.txt"));
    let t = train.to_str().unwrap();
    ok(&["train", "--config", q, "--data", t, "--out", "full"], dir.path());
    ok(&["train", "--config", q, "--data", t, "--until", "2", "--out", "half"], dir.path());
    assert_eq!(fs::read_to_string(dir.path().join("half/epochs.log")).unwrap().lines().count(), 2);
    ok(&["train", "--data", t, "--resume", "half/checkpoint.acel", "--out", "resumed"], dir.path());
    let full = fs::read(dir.path().join("full/checkpoint.acel")).unwrap();
    let resumed = fs::read(dir.path().join("resumed/checkpoint.acel")).unwrap();
    assert!(full == resumed, "resumed checkpoint differs from the uninterrupted one");
    assert_eq!(
        fs::read_to_string(dir.path().join("full/epochs.log")).unwrap(),
        fs::read_to_string(dir.path().join("resumed/epochs.log")).unwrap()
    );
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = quick_data(dir.path());
    let quick = config("quick.toml");
    let (q, train) = (quick.to_str().unwrap(), data.join("train.txt"));
    let t = train.to_str().unwrap();
    ok(&["train", "--config", q, "--data", t, "--epochs", "0", "--out", "a"], dir.path());
    ok(&["train", "--config", q, "--data", t, "--epochs", "0", "--out", "b"], dir.path());
    assert_eq!(fs::read_to_string(dir.path().join("a/epochs.log")).unwrap(), "");
    assert_eq!(manifest(&dir.path().join("a"))["outputs"], manifest(&dir.path().join("b"))["outputs"]);
    // Evaluation of the untrained model still runs.
    ok(&["eval", "--checkpoint", "a/checkpoint.acel", "--data", data.join("test.txt").to_str().unwrap()], dir.path());
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_backward() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = config("tiny.toml");
    let t = tiny.to_str().unwrap();
    let report = ok(&["gradcheck", "--config", t], dir.path());
    for group in ["lora", "hgnn", "temperature"] {
        assert!(report.contains(group), "{report}");
    }
    let plain = ok(&["gradcheck", "--config", t, "--seed", "1", "--hgnn-image", "false", "--hgnn-text", "false"], dir.path());
    assert!(!plain.contains("hgnn"), "{plain}");

    let bad = acelora(&["gradcheck", "--config", t, "--inject-fault"], dir.path());
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("gradient mismatch"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let quick = config("quick.toml");
    let out = ok(
        &[
            "sweep", "--config", quick.to_str().unwrap(), "--epochs", "1", "--axis", "k", "--values", "2,3",
            "--seed-list", "0,1", "--out", "sweep",
        ],
        dir.path(),
    );
    let table = fs::read_to_string(dir.path().join("sweep/table.tsv")).unwrap();
    assert_eq!(out, table);
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with('2'));
    assert!(table.lines().nth(2).unwrap().starts_with('3'));
}

#[test]
fn simmap_and_incidence_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let data = quick_data(dir.path());
    let quick = config("quick.toml");
    let test = data.join("test.txt");
    let ts = test.to_str().unwrap();
    ok(
        &["train", "--config", quick.to_str().unwrap(), "--data", data.join("train.txt").to_str().unwrap(), "--epochs", "1", "--out", "run"],
        dir.path(),
    );
    let ck = "run/checkpoint.acel";

    let printed = ok(&["simmap", "--checkpoint", ck, "--data", ts, "--index", "0", "--out", "map"], dir.path());
    assert!(printed.contains("margin"), "{printed}");
    let pgm = fs::read(dir.path().join("map/simmap.pgm")).unwrap();
    let header = b"P5\n3 3\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 9);
    assert_eq!(fs::read_to_string(dir.path().join("map/simmap.txt")).unwrap().lines().count(), 3);
    ok(&["simmap", "--checkpoint", ck, "--data", ts, "--index", "0", "--class", "2", "--out", "map2"], dir.path());
    assert!(!acelora(&["simmap", "--checkpoint", ck, "--data", ts, "--index", "0", "--class", "3", "--out", "x"], dir.path()).status.success());

    let image = ok(&["incidence", "--checkpoint", ck, "--data", ts, "--index", "0"], dir.path());
    assert!(image.starts_with("# incidence n=10 k=3"), "{image}");
    ok(&["incidence", "--checkpoint", ck, "--data", ts, "--index", "0", "--modality", "text", "--out", "inc"], dir.path());
    assert!(dir.path().join("inc/incidence.txt").exists());
    let bad = acelora(&["incidence", "--checkpoint", ck, "--data", ts, "--index", "0", "--modality", "audio"], dir.path());
    assert!(!bad.status.success());
    let out_of_range = acelora(&["incidence", "--checkpoint", ck, "--data", ts, "--index", "999"], dir.path());
    assert!(!out_of_range.status.success());
}
