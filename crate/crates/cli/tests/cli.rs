use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pice")).args(args).env_remove("PICE_SEED").output().expect("binary runs")
}

fn short_config(dir: &Path) -> String {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    cfg["workload"]["duration_s"] = 120.0.into();
    cfg["workload"]["warmup_s"] = 30.0.into();
    let path = dir.join("short.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out = dir.path().join("run");
    let o = pice(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["metrics"]["throughput"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(out.join("records.csv")).unwrap();
    assert!(csv.starts_with("query_id,arrival,mode,sketch_len,l_i,device,e2e_latency_s,winner_model"));
    assert_eq!(csv.lines().count() as u64, report["counts"]["arrived"].as_u64().unwrap() + 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("throughput"));
}

#[test]
fn policy_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(pice(&["simulate", "--config", &cfg, "--out", a.to_str().unwrap(), "--policy", "cloud_only", "--seed", "5", "--quiet"]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_pice"))
        .args(["simulate", "--config", &cfg, "--out", b.to_str().unwrap(), "--policy", "cloud_only", "--quiet"])
        .env("PICE_SEED", "5")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    let ra = fs::read_to_string(a.join("report.json")).unwrap();
    assert_eq!(ra, fs::read_to_string(b.join("report.json")).unwrap());
    let v: Value = serde_json::from_str(&ra).unwrap();
    assert_eq!(v["policy"], "cloud_only");
    assert_eq!(v["seed"], 5);
}

#[test]
fn missing_config_and_bad_policy_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = pice(&["simulate", "--config", "/nonexistent/cfg.json", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!out.join("report.json").exists());
    let cfg = short_config(dir.path());
    assert!(!pice(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--policy", "magic"]).status.success());
    assert!(!pice(&["simulate", "--out", out.to_str().unwrap()]).status.success());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out = dir.path().join("sweep");
    let o = pice(&[
        "sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--sweep-param", "queue_capacity", "--sweep-values", "1,4", "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<Value> = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r["value"].as_f64().unwrap()).collect::<Vec<_>>(), vec![1.0, 4.0]);
    assert!(!pice(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--sweep-param", "warp", "--sweep-values", "1"]).status.success());
}

fn write_samples(path: &Path, per_model: &[(&str, &str, f64)], lengths: &[u32]) {
    let mut lines = String::new();
    for (model, device, rate) in per_model {
        for &l in lengths {
            lines += &format!(
                "{{\"model_id\":\"{model}\",\"device_id\":\"{device}\",\"output_length\":{l},\"wall_time_s\":{}}}\n",
                f64::from(l) / rate
            );
        }
    }
    fs::write(path, lines).unwrap();
}

#[test]
fn profile_fits_models_and_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples.jsonl");
    write_samples(&samples, &[("big", "cloud", 20.0), ("small", "edge-0", 40.0)], &[100, 200, 400]);
    let out = dir.path().join("models.json");
    let o = pice(&["profile", "--config", samples.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read_to_string(&out).unwrap();
    let v: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["models"].as_array().unwrap().len(), 2);
    let c = &v["cost_coefficients"][0];
    assert_eq!(c["model_id"], "small");
    assert!((c["c"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    assert!(pice(&["profile", "--config", samples.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]).status.success());
    assert_eq!(first, fs::read_to_string(&out).unwrap());
}

#[test]
fn profile_rejects_single_sample() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples.jsonl");
    write_samples(&samples, &[("big", "cloud", 20.0)], &[100]);
    let out = dir.path().join("models.json");
    let o = pice(&["profile", "--config", samples.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn score_picks_winner_and_collapses_to_geo_prob() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cands.json");
    let half = 0.5f64.ln();
    let body = serde_json::json!({
        "job_id": 3,
        "sketch": "alpha beta gamma",
        "candidates": [
            {"text": "alpha beta gamma delta", "token_logprobs": [0.0, 0.0, 0.0, 0.0], "model_id": "a"},
            {"text": "unrelated words here", "token_logprobs": [half, half, half], "model_id": "b"}
        ]
    });
    fs::write(&path, body.to_string()).unwrap();
    let out = dir.path().join("score.json");
    let o = pice(&["score", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("winner: #0 (a)"));

    let o = pice(&["score", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--weights", "1,0", "--quiet"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    for c in v["candidates"].as_array().unwrap() {
        assert!((c["confidence"].as_f64().unwrap() - c["geo_prob"].as_f64().unwrap()).abs() < 1e-12);
    }

    assert!(!pice(&["score", "--config", path.to_str().unwrap(), "--weights", "1,0,0", "--quiet"]).status.success());

    let bad = serde_json::json!({"candidates": [{"text": "x", "token_logprobs": [0.3], "model_id": "a"}]});
    fs::write(&path, bad.to_string()).unwrap();
    assert!(!pice(&["score", "--config", path.to_str().unwrap(), "--quiet"]).status.success());
}

#[test]
fn label_prefs_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    let pair = serde_json::json!({
        "input_text": "q",
        "sketch_a": "a b c d",
        "sketch_b": "a b",
        "full_answer_a": "x y z",
        "full_answer_b": "x y z",
        "reference_answer": "x y z"
    });
    fs::write(&pairs, format!("{pair}\n\n{pair}\n")).unwrap();
    let out = dir.path().join("triplets.jsonl");
    let o = pice(&["label-prefs", "--config", pairs.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2);
    let t: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(t["winner"], "a b");
}

#[test]
fn report_round_trips_saved_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out = dir.path().join("run");
    assert!(pice(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]).status.success());
    let csv = dir.path().join("again.csv");
    let o = pice(&["report", out.join("report.json").to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(csv).unwrap(), fs::read_to_string(out.join("records.csv")).unwrap());
    assert!(!pice(&["report", "/nonexistent/report.json"]).status.success());
}
