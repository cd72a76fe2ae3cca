//! End-to-end runs of the `msca` binary on tiny settings.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seeds": [0],
  "data": { "samples_per_class": 8 },
  "hyper": { "epochs": 1 },
  "budget": 1
}"#;

fn msca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msca"))
        .args(args)
        .env_remove("MSCA_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The versioned envelope every subcommand writes.
fn check_result(out: &Path, command: &str) -> Value {
    let doc = read_json(&out.join("result.json"));
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["command"], command);
    assert!(doc["result"].is_object());
    assert!(out.join("config.json").is_file());
    doc["result"].clone()
}

#[test]
fn roundtrip_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rt");
    let ok = msca(&["--out", s(&out), "roundtrip"]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    let result = check_result(&out, "roundtrip");
    assert_eq!(result["passed"], true);
    assert_eq!(result["checks"].as_array().unwrap().len(), 3);

    let strict = msca(&["--out", s(&out), "roundtrip", "--tolerance", "0"]);
    assert_eq!(strict.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));

    let degenerate = msca(&[
        "--out",
        s(&out),
        "roundtrip",
        "--height",
        "1",
        "--width",
        "1",
    ]);
    assert_eq!(degenerate.status.code(), Some(0));

    let bad = msca(&["--out", s(&out), "roundtrip", "--height", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    let unknown = msca(&["roundtrip", "--frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn out_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_msca"))
        .args(["roundtrip", "--trials", "2"])
        .env("MSCA_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    check_result(&dir.path().join("roundtrip"), "roundtrip");
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let big_grid = msca(&["--out", s(&out), "train", "--grid", "8"]);
    assert_eq!(big_grid.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&big_grid.stderr).contains("exceeds"));

    let bad_k = msca(&["--out", s(&out), "train", "--strategy", "ms", "--k", "3"]);
    assert_eq!(bad_k.status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{ "epochz": 3 }"#).unwrap();
    let unknown_field = msca(&["--config", s(&cfg), "--out", s(&out), "roundtrip"]);
    assert_eq!(unknown_field.status.code(), Some(2));

    let missing = msca(&["--config", s(&dir.path().join("nope.json")), "roundtrip"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn written_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let first = dir.path().join("first");
    let run = msca(&[
        "--config",
        s(&cfg),
        "--out",
        s(&first),
        "--seed",
        "3",
        "train",
        "--strategy",
        "ms",
    ]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let second = dir.path().join("second");
    let again = msca(&[
        "--config",
        s(&first.join("config.json")),
        "--out",
        s(&second),
        "train",
    ]);
    assert_eq!(again.status.code(), Some(0));
    for name in ["config.json", "result.json", "history.csv"] {
        assert_eq!(
            fs::read(first.join(name)).unwrap(),
            fs::read(second.join(name)).unwrap(),
            "{name}"
        );
    }
    let result = check_result(&first, "train");
    assert_eq!(result["strategy"], "ms");
    assert_eq!(result["record"]["seed"], 3);
}

#[test]
fn every_strategy_trains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for strategy in ["none", "gap", "ms", "fr", "lr", "ld", "fd", "nas"] {
        let out = dir.path().join(strategy);
        let run = msca(&[
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "train",
            "--strategy",
            strategy,
        ]);
        assert_eq!(
            run.status.code(),
            Some(0),
            "{strategy}: {}",
            String::from_utf8_lossy(&run.stderr)
        );
        let acc = check_result(&out, "train")["record"]["final_val_accuracy"]
            .as_f64()
            .unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn eval_components_writes_sixteen_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("eval");
    let run = msca(&["--config", s(&cfg), "--out", s(&out), "eval-components"]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let result = check_result(&out, "eval-components");
    assert_eq!(result["scores"].as_array().unwrap().len(), 16);
    let csv = fs::read_to_string(out.join("scores.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("u,v,score"));
    assert_eq!(lines.count(), 16);
}

#[test]
fn ts_sweep_has_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    let run = msca(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "compare",
        "--criterion",
        "ts",
        "--ks",
        "1,2,4,8,16,32",
    ]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let result = check_result(&out, "compare");
    let rows = result["table"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[5]["effective_k"], 16);
    assert!(result["baseline"]["mean"].is_f64());
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(table.lines().nth(1).unwrap().starts_with("ts,1,1,"));
    assert!(out.join("scores.csv").is_file());

    // reusing the saved scores skips the measurement
    let reuse = dir.path().join("reuse");
    let run = msca(&[
        "--config",
        s(&cfg),
        "--out",
        s(&reuse),
        "compare",
        "--criterion",
        "ts",
        "--ks",
        "16",
        "--scores",
        s(&out.join("scores.csv")),
        "--no-baseline",
    ]);
    assert_eq!(run.status.code(), Some(0));
    assert!(!reuse.join("scores.csv").exists());
    assert!(check_result(&reuse, "compare")["baseline"].is_null());
}

#[test]
fn learnable_table_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("learnable");
    let run = msca(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "compare",
        "--mode",
        "learnable",
        "--no-baseline",
    ]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let rows = check_result(&out, "compare")["table"]["rows"]
        .as_array()
        .unwrap()
        .clone();
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["FR", "LR", "LD", "FD"]);
    let params: Vec<u64> = rows
        .iter()
        .map(|r| r["param_count"].as_u64().unwrap())
        .collect();
    assert_eq!(params[0], params[3]);
    assert_eq!(params[1], params[2]);
    assert!(params[1] > params[0]);
}

#[test]
fn search_writes_an_assignment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("search");
    let run = msca(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "search",
        "--nas-parts",
        "8",
    ]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    check_result(&out, "search");
    let a = read_json(&out.join("assignment.json"));
    assert_eq!(a["n"], 8);
    assert_eq!(a["H"], 4);
    assert_eq!(a["W"], 4);
    let comps = a["components"].as_array().unwrap();
    assert_eq!(comps.len(), 8);
    for c in comps {
        assert!(c[0].as_u64().unwrap() < 4 && c[1].as_u64().unwrap() < 4);
    }
}

#[test]
fn bench_reports_timings() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let run = msca(&[
        "--out",
        s(&out),
        "bench",
        "--size",
        "8",
        "--channels",
        "8",
        "--iterations",
        "3",
    ]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let b = read_json(&out.join("bench.json"));
    for key in [
        "dct_separable_us",
        "dct_naive_us",
        "attention_gap_us",
        "attention_multi_spectral_us",
    ] {
        assert!(b[key].as_f64().unwrap() >= 0.0, "{key}");
    }
    assert!(
        b["attention_multi_spectral_flops"].as_u64().unwrap()
            >= b["attention_gap_flops"].as_u64().unwrap()
    );
    // timings vary run to run, so bench keeps them out of result.json
    assert!(out.join("config.json").is_file());
    assert!(!out.join("result.json").exists());
}
