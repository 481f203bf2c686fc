//! Command-line runs end to end, and exit codes for failures.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn charm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_charm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = charm(args);
    assert!(
        out.status.success(),
        "charm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_CONFIG: &str = r#"{
    "epochs": 1,
    "batch_size": 4,
    "points": 96,
    "arch": {
        "encoder_widths": [8, 16],
        "decoder_widths": [16],
        "presence_hidden": 8,
        "num_teeth": 16,
        "landmarks_per_tooth": 5,
        "heatmap_activation": "sigmoid",
        "char_module": true
    }
}"#;

fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&[
        "generate", "--count", "10", "--mix", "uniform", "--seed", "3", "--out", p(&data),
        "--points-per-tooth", "30", "--gingiva-points", "60",
    ]);
    data
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    assert!(data.join("split.json").is_file());
    let config = dir.path().join("config.json");
    fs::write(&config, SMALL_CONFIG).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    ok(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&ckpt)]);
    let history = fs::read_to_string(dir.path().join("model.ckpt.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let test_dir = data.join("test");
    let preds = dir.path().join("preds");
    fs::create_dir(&preds).unwrap();
    let mut clouds: Vec<_> = fs::read_dir(&test_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "ply"))
        .collect();
    clouds.sort();
    assert!(!clouds.is_empty());
    for cloud in &clouds {
        let stem = cloud.file_stem().unwrap().to_str().unwrap();
        let pre = dir.path().join(format!("{stem}.pre.ply"));
        ok(&["preprocess", "--in", p(cloud), "--out", p(&pre), "--points", "96"]);
        let out = preds.join(format!("{stem}.json"));
        ok(&["predict", "--ckpt", p(&ckpt), "--in", p(cloud), "--out", p(&out), "--points", "96"]);
        let again = dir.path().join("again.json");
        ok(&["predict", "--ckpt", p(&ckpt), "--in", p(&pre), "--out", p(&again)]);
        // Same seed, so the preprocessed file sees the same points; only
        // the model id (taken from the file name) differs.
        let a = fs::read_to_string(&out).unwrap();
        let b = fs::read_to_string(&again).unwrap();
        assert_eq!(without_model_id(&a), without_model_id(&b));
    }
    let report = dir.path().join("report.csv");
    let table = ok(&["evaluate", "--pred", p(&preds), "--gt", p(&test_dir), "--out", p(&report)]);
    assert!(table.contains("micro"));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("type,models,f1,tooth_f1,mede_mm,msr_pct,tp,fp,fn,tn\n"));
    let bench = ok(&["benchmark", "--ckpt", p(&ckpt), "--data", p(&data), "--warmup", "1", "--reps", "3", "--points", "96"]);
    assert!(bench.contains("per model"), "{bench}");
}

/// Prediction JSON text without its model id line.
fn without_model_id(text: &str) -> String {
    text.lines().filter(|l| !l.contains("\"model_id\"")).collect::<Vec<_>>().join("\n")
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let config = dir.path().join("config.json");
    fs::write(&config, SMALL_CONFIG).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    ok(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&a), "--seed", "9"]);
    ok(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&b), "--seed", "9"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    ok(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&b), "--baseline"]);
}

#[test]
fn input_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ply");
    let out = charm(&["preprocess", "--in", p(&missing), "--out", p(&dir.path().join("o.ply"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ply"));
    assert_eq!(charm(&["train"]).status.code(), Some(2));
    assert_eq!(charm(&["generate", "--count", "2", "--out", p(dir.path())]).status.code(), Some(2));
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"dropout": 1.5}"#).unwrap();
    let data = small_dataset(dir.path());
    let out = charm(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn format_errors_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.xyz");
    fs::write(&bad, "1 2 3\n4 nan 6\n").unwrap();
    let out = charm(&["preprocess", "--in", p(&bad), "--out", p(&dir.path().join("o.ply"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));

    let data = small_dataset(dir.path());
    let config = dir.path().join("config.json");
    fs::write(&config, SMALL_CONFIG).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    ok(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&ckpt)]);
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() - 9]).unwrap();
    let cloud = fs::read_dir(data.join("test"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "ply"))
        .unwrap();
    let out = charm(&["predict", "--ckpt", p(&ckpt), "--in", p(&cloud), "--out", p(&dir.path().join("p.json"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn non_finite_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let config = dir.path().join("config.json");
    fs::write(&config, SMALL_CONFIG.replace("\"epochs\": 1", "\"epochs\": 3, \"lr\": 1e300")).unwrap();
    let out = charm(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("m.ckpt").exists());
}
