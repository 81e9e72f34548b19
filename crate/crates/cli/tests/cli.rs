use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "method": "preload",
  "arch": {"input_dim": 2, "hidden_dims": [16, 16], "num_classes": 2},
  "dataset": {"kind": "two_moons", "n_per_class": 200, "test_per_class": 100, "noise_sd": 0.1},
  "epochs": 8,
  "seeds": [0],
  "eval": {"far_away_count": 200}
}"#;

fn preload(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_preload"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, method: &str, seeds: &str) -> PathBuf {
    let mut text = SMALL
        .replace("\"preload\"", &format!("\"{method}\""))
        .replace("[0]", seeds);
    if method.ends_with("_ft") {
        text = text.replace("\"epochs\"", "\"ft\": {},\n  \"epochs\"");
    }
    let path = dir.join(format!("{method}.json"));
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Parses the single stderr line of a failed run.
fn error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "stderr: {stderr}");
    serde_json::from_str(stderr.trim_end()).unwrap()
}

fn train(dir: &Path, method: &str, out: &str) -> PathBuf {
    let cfg = config(dir, method, "[0]");
    let out = dir.join(out);
    let r = preload(&["train", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    out
}

#[test]
fn train_writes_model_metrics_and_record() {
    let tmp = TempDir::new().unwrap();
    let out = train(tmp.path(), "preload", "run");
    assert!(out.join("model.bin").is_file());

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("dataset,method,metric,value,stderr"));
    let datasets: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert!(datasets.contains(&"faraway") && datasets.contains(&"faraway_rd"));

    let run: Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "train");
    assert_eq!(run["runs"][0]["epochs"].as_array().unwrap().len(), 8);
    assert_eq!(run["config"]["method"], "preload");
}

#[test]
fn same_seed_gives_identical_metrics() {
    let tmp = TempDir::new().unwrap();
    let a = train(tmp.path(), "preload", "a");
    let b = train(tmp.path(), "preload", "b");
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("model.bin")).unwrap(),
        fs::read(b.join("model.bin")).unwrap()
    );
}

#[test]
fn eval_reproduces_training_metrics() {
    let tmp = TempDir::new().unwrap();
    let out = train(tmp.path(), "preload", "run");
    let cfg = config(tmp.path(), "preload", "[0]");
    let eval_dir = tmp.path().join("eval");
    let model = out.join("model.bin");
    let r = preload(&[
        "eval",
        "--config",
        s(&cfg),
        "--model",
        s(&model),
        "--out-dir",
        s(&eval_dir),
    ]);
    assert!(r.status.success());
    assert_eq!(
        fs::read_to_string(out.join("metrics.csv")).unwrap(),
        fs::read_to_string(eval_dir.join("metrics.csv")).unwrap()
    );
}

#[test]
fn several_seeds_get_their_own_directories() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "standard", "[3, 4]");
    let out = tmp.path().join("multi");
    let r = preload(&["train", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(r.status.success());
    for seed in [3, 4] {
        let d = out.join(format!("seed-{seed}"));
        assert!(d.join("model.bin").is_file());
        let rec: Value = serde_json::from_str(&fs::read_to_string(d.join("run.json")).unwrap()).unwrap();
        assert_eq!(rec["seed"], seed);
    }
    let agg = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let per_seed = fs::read_to_string(out.join("seed-3/metrics.csv")).unwrap();
    assert_eq!(agg.lines().count(), per_seed.lines().count());

    // --seed narrows the list to one run written at the root
    let single = tmp.path().join("single");
    let r = preload(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "4",
        "--out-dir",
        s(&single),
    ]);
    assert!(r.status.success());
    assert!(single.join("model.bin").is_file());
    assert_eq!(
        fs::read(single.join("model.bin")).unwrap(),
        fs::read(out.join("seed-4/model.bin")).unwrap()
    );
}

#[test]
fn finetune_adds_extra_head_to_standard_model() {
    let tmp = TempDir::new().unwrap();
    let base = train(tmp.path(), "standard", "base").join("model.bin");
    let cfg = config(tmp.path(), "preload_ft", "[0]");
    let out = tmp.path().join("ft");
    let r = preload(&[
        "finetune",
        "--config",
        s(&cfg),
        "--model",
        s(&base),
        "--out-dir",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let run: Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    let stages: Vec<&str> = run["runs"][0]["epochs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["stage"].as_str().unwrap())
        .collect();
    assert_eq!(stages.iter().filter(|&&s| s == "head").count(), 10);
    assert_eq!(stages.iter().filter(|&&s| s == "full").count(), 10);

    // a model that already has the quadratic head cannot be a fine-tune base
    let ft_model = out.join("model.bin");
    let again = preload(&[
        "finetune",
        "--config",
        s(&cfg),
        "--model",
        s(&ft_model),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(error_line(&again)["kind"], "method_mismatch");
}

#[test]
fn probe_and_grid_tables() {
    let tmp = TempDir::new().unwrap();
    let model = train(tmp.path(), "preload", "run").join("model.bin");
    let out = tmp.path().join("probe");
    let r = preload(&[
        "probe",
        "--model",
        s(&model),
        "--directions",
        "7",
        "--t",
        "1,100,10000",
        "--out-dir",
        s(&out),
    ]);
    assert!(r.status.success());
    let csv = fs::read_to_string(out.join("probe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7 * 3);
    assert!(csv.starts_with("direction,t,predicted_class,max_prob,extra_prob,logit_gap\n"));

    let out = tmp.path().join("grid");
    let r = preload(&[
        "grid",
        "--model",
        s(&model),
        "--resolution",
        "3",
        "--out-dir",
        s(&out),
    ]);
    assert!(r.status.success());
    let csv = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    for line in csv.lines().skip(1) {
        let conf: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(conf > 0.0 && conf <= 1.0);
    }
}

#[test]
fn verify_passes() {
    let tmp = TempDir::new().unwrap();
    let r = preload(&["verify", "--seed", "1", "--out-dir", s(tmp.path())]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stdout));
    let stdout = String::from_utf8(r.stdout).unwrap();
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")));
    let run: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("run.json")).unwrap()).unwrap();
    assert!(run["checks"].as_array().unwrap().len() >= 5);
}

#[test]
fn failures_print_one_json_line() {
    let tmp = TempDir::new().unwrap();
    let out = s(tmp.path());

    let missing = tmp.path().join("missing.json");
    let r = preload(&["train", "--config", s(&missing), "--out-dir", out]);
    assert_eq!(r.status.code(), Some(1));
    let e = error_line(&r);
    assert_eq!(e["kind"], "io");
    assert!(e["error"].as_str().unwrap().contains("missing.json"));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"method": "preload", "arch": 3}"#).unwrap();
    assert_eq!(
        error_line(&preload(&["train", "--config", s(&bad), "--out-dir", out]))["kind"],
        "config"
    );

    let r = preload(&["train", "--frobnicate"]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_line(&r)["kind"], "usage");

    let r = preload(&["train", "--method", "bogus", "--out-dir", out]);
    assert_eq!(error_line(&r)["kind"], "usage");

    let junk = tmp.path().join("junk.bin");
    fs::write(&junk, b"not a model").unwrap();
    assert_eq!(
        error_line(&preload(&["eval", "--model", s(&junk), "--out-dir", out]))["kind"],
        "model_format"
    );

    let model = train(tmp.path(), "preload", "run").join("model.bin");
    let r = preload(&["probe", "--model", s(&model), "--t", "10,1", "--out-dir", out]);
    assert_eq!(error_line(&r)["kind"], "usage");
    let r = preload(&[
        "eval",
        "--method",
        "standard",
        "--model",
        s(&model),
        "--out-dir",
        out,
    ]);
    assert_eq!(error_line(&r)["kind"], "method_mismatch");
}
