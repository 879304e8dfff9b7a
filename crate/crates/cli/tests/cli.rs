use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tsrmcl(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsrmcl")).current_dir(cwd).args(args).output().expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = tsrmcl(cwd, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn synth_then_dataset_vocab_train_classify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "3", "--out", "s"]);
    assert!(d.join("s/annotations.json").exists());
    assert_eq!(json(&d.join("s/config.json"))["resolved"]["subcommand"], "synth");

    let stdout = ok(d, &["build-dataset", "--annotations", "s/annotations.json", "--root", "s", "--out", "bd"]);
    assert!(stdout.contains("350 crops"), "{stdout}");
    let pairs = fs::read_to_string(d.join("bd/pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 350);
    let manifest = json(&d.join("bd/manifest.json"));
    assert_eq!(manifest["split"]["train_total"], 233);

    ok(d, &["build-vocab", "--corpus", "bd/pairs.jsonl", "--size", "256", "--out", "v"]);
    ok(d, &["tokenize", "--vocab", "v/vocab.json", "--out", "t", "speed limit 40 km/h"]);
    let tok: Value = serde_json::from_str(fs::read_to_string(d.join("t/tokens.jsonl")).unwrap().trim()).unwrap();
    let tokens: Vec<&str> = tok["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    assert_eq!(tokens.first(), Some(&"[CLS]"));
    assert_eq!(tokens.last(), Some(&"[SEP]"));
    assert!(tokens.contains(&"40"), "{tokens:?}");

    ok(d, &["train", "--data", "bd", "--epochs", "1", "--seed", "1", "--out", "m"]);
    for f in ["classes.json", "summary.json", "trace.csv", "vocab.json", "model"] {
        assert!(d.join("m").join(f).exists(), "{f}");
    }
    let crop = pairs.lines().next().unwrap();
    let crop = serde_json::from_str::<Value>(crop).unwrap()["image"].as_str().unwrap().to_string();
    let crop = format!("bd/{crop}");
    ok(d, &["classify", "--model", "m", "--out", "c", &crop, &crop]);
    let preds = fs::read_to_string(d.join("c/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 2);
    let first: Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    let total: f64 = first["probabilities"].as_object().unwrap().values().map(|p| p.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    let stats = json(&d.join("c/cache_stats.json"));
    assert_eq!(stats["misses"], 8);
    assert_eq!(stats["hits"], 8);

    // Every command kept to its own output directory.
    assert_eq!(entries(d), ["bd", "c", "m", "s", "t", "v"]);
}

#[test]
fn eval_scores_a_hand_case() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("gt.json"),
        r#"{"imgs": {"a": {"path": "a.ppm", "objects": [
            {"category": "i1", "bbox": {"xmin": 0, "ymin": 0, "xmax": 10, "ymax": 10}},
            {"category": "i1", "bbox": {"xmin": 20, "ymin": 20, "xmax": 30, "ymax": 30}}]}}}"#,
    )
    .unwrap();
    fs::write(
        d.join("pred.jsonl"),
        "{\"image_id\":\"a\",\"category\":\"i1\",\"bbox\":[0,0,10,10],\"confidence\":0.9}\n\
         {\"image_id\":\"a\",\"category\":\"i1\",\"bbox\":[50,50,60,60],\"confidence\":0.8}\n",
    )
    .unwrap();
    ok(d, &["eval", "--pred", "pred.jsonl", "--gt", "gt.json", "--out", "e"]);
    let r = json(&d.join("e/report.json"));
    // One hit out of two boxes at full precision: six of eleven recall points.
    let ap = r["report"]["map50"].as_f64().unwrap();
    assert!((ap - 6.0 / 11.0).abs() < 1e-12, "{ap}");
    assert_eq!(r["report"]["precision"], 0.5);
    assert_eq!(r["localization"]["detections_scored"], 1);
    assert_eq!(r["localization"]["mean_inner_wiou_loss"], 0.0);
    let csv = fs::read_to_string(d.join("e/per_category.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("i1,tail,"), "{csv}");
}

#[test]
fn stats_counts_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "s"]);
    ok(d, &["stats", "--annotations", "s/annotations.json", "--out", "st"]);
    assert_eq!(json(&d.join("st/stats.json"))["total_boxes"], 350);
}

#[test]
fn bench_reports_a_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["bench-cache", "--images", "3", "--repeats", "1", "--out", "b"]);
    let b = json(&d.join("b/bench.json"));
    assert_eq!(b["texts"], 221);
    assert!(b["report"]["speedup"].as_f64().unwrap() > 1.0);
}

#[test]
fn usage_errors_exit_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(tsrmcl(d, &["bogus"]).status.code(), Some(2));
    assert_eq!(tsrmcl(d, &["synth"]).status.code(), Some(2));
    let missing = tsrmcl(d, &["tokenize", "--vocab", "nope.json", "--out", "t", "x"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));
    assert_eq!(tsrmcl(d, &["build-vocab", "--corpus", "nope.txt", "--size", "8", "--out", "v"]).status.code(), Some(2));
    assert_eq!(tsrmcl(d, &["synth", "--profile", "nope", "--out", "s"]).status.code(), Some(2));
    assert_eq!(tsrmcl(d, &["--help"]).status.code(), Some(0));
    assert!(entries(d).is_empty(), "{:?}", entries(d));
}

#[test]
fn malformed_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("gt.json"), "{not json").unwrap();
    fs::write(d.join("pred.jsonl"), "").unwrap();
    let out = tsrmcl(d, &["eval", "--pred", "pred.jsonl", "--gt", "gt.json", "--out", "e"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
