use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cir_core::io;
use serde_json::Value;

const SMALL: &str = r#"{
  "seed": 11,
  "world": {"dim": 16, "n_train_pairs": 256, "n_eval_queries": 20, "gallery_size": 120},
  "train": {"batch_size": 32, "steps": 15, "warmup_steps": 3},
  "eval": {"gamma_preset": "cirr", "k_values": [1, 10]}
}"#;

fn cir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cir"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cir(dir, args);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(dir: &Path, args: &[&str], needle: &str) {
    let out = cir(dir, args);
    assert!(!out.status.success(), "{:?} succeeded", args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(needle), "{:?}: {}", args, err);
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), SMALL).unwrap();
    ok(dir.path(), &["gen-data", "--config", "config.json"]);
    ok(dir.path(), &["train", "--config", "config.json"]);
    dir
}

#[test]
fn full_pipeline_writes_echoes_and_reports() {
    let dir = prepared();
    let d = dir.path();
    for echo in ["data", "run"] {
        let cfg = json(&d.join(echo).join(io::RESOLVED_CONFIG));
        assert_eq!(cfg["seed"], 11);
        assert_eq!(cfg["prng"], "chacha8");
        assert_eq!(cfg["eval"]["gamma"].as_f64().unwrap() as f32, 0.6);
    }
    let log = fs::read_to_string(d.join("run").join(io::TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 15);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "L_ori", "L_itcon", "L_mse", "L_ts", "L_ss", "L_deg", "N_S"] {
        assert!(first.get(key).is_some(), "missing {}", key);
    }

    ok(d, &["evaluate", "--config", "config.json", "--gamma", "0.3", "--out", "r.json"]);
    let report = json(&d.join("r.json"));
    assert_eq!(report["gamma"].as_f64().unwrap() as f32, 0.3);
    assert_eq!(report["n_queries"], 20);
    for key in ["R@1", "R@10", "mAP@1", "mAP@10"] {
        let v = report["metrics"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{} = {}", key, v);
    }
    for mode in ["image_only", "text_only", "average", "slerp"] {
        assert!(report["baselines"][mode]["R@1"].is_number(), "{}", mode);
    }
}

#[test]
fn compose_and_mine_produce_structured_output() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["compose", "--config", "config.json", "--query-id", "q00003", "--top", "4", "--out", "c.json"]);
    let c = json(&d.join("c.json"));
    assert_eq!(c["query_id"], "q00003");
    assert_eq!(c["top"].as_array().unwrap().len(), 4);
    assert_eq!(c["vector"].as_array().unwrap().len(), 16);
    fails_with(d, &["compose", "--config", "config.json", "--query-id", "nope"], "nope");

    let stdout = ok(
        d,
        &[
            "mine-sset",
            "--images",
            "data/train_images.emb",
            "--texts",
            "data/train_texts.emb",
            "--batch-size",
            "32",
            "--out",
            "sset.jsonl",
        ],
    );
    assert!(stdout.contains("rows selected"));
    let rows: Vec<Value> = fs::read_to_string(d.join("sset.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 256);
    for r in &rows {
        let selected = r["selected"].as_bool().unwrap();
        let differs = r["argmax"] != r["index"];
        assert!(!selected || differs);
    }
    assert!(d.join("sset.jsonl.config.json").exists());
}

#[test]
fn bad_inputs_fail_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("unknown.json"), r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    fails_with(d, &["gen-data", "--config", "unknown.json"], "learning_rat");
    fs::write(d.join("bad.json"), r#"{"train": {"tau": -1}}"#).unwrap();
    fails_with(d, &["train", "--config", "bad.json"], "tau");
    fs::write(d.join("seeds.json"), r#"{"seed": 1, "train": {"seed": 2}}"#).unwrap();
    fails_with(d, &["gen-data", "--config", "seeds.json"], "seed");
    fails_with(d, &["gen-data", "--config", "missing.json"], "missing.json");

    fs::write(d.join("x.emb"), b"NOTANEMBEDDINGFILE......").unwrap();
    fs::write(d.join("x.ids.jsonl"), "").unwrap();
    fails_with(
        d,
        &["mine-sset", "--images", "x.emb", "--texts", "x.emb", "--out", "o.jsonl"],
        "x.emb",
    );
    assert!(!d.join("o.jsonl").exists());
}
