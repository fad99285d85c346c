// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn aid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aid"))
        .args(args)
        .env_remove("AID_SEED")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

/// Writes a toy trace with `steps` generated tokens into `dir`.
fn toy_trace(dir: &Path, steps: &str) -> PathBuf {
    let out = aid(&[
        "decode",
        "--seed",
        "3",
        "--plant",
        "1",
        "--steps",
        steps,
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    dir.join("trace.json")
}

fn csv_body(stdout: &[u8]) -> Vec<Vec<String>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(stdout)
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn analyze_lists_k_hijackers_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let trace = toy_trace(dir.path(), "4");
    let out_dir = dir.path().join("out");
    let doc = json(&aid(&[
        "analyze",
        trace.to_str().unwrap(),
        "--k",
        "2",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(doc["hijackers"]["hijackers"].as_array().unwrap().len(), 2);
    assert_eq!(doc["hijackers"]["hijackers"][0], 5);
    for name in ["salience.json", "hijackers.csv", "similarity.csv"] {
        let body = std::fs::read_to_string(out_dir.join(name)).unwrap();
        assert!(
            body.contains("\"command\":\"analyze\"") || body.contains("\"command\": \"analyze\"")
        );
    }
    let sim = std::fs::read_to_string(out_dir.join("similarity.csv")).unwrap();
    // Three instruction tokens, four generated tokens each.
    assert_eq!(csv_body(sim.as_bytes()).len(), 12);
}

#[test]
fn analyze_without_generated_tokens_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let trace = toy_trace(dir.path(), "0");
    let out = aid(&["analyze", trace.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no generated tokens"));
}

#[test]
fn head_policy_only_changes_that_manifest_field() {
    let dir = tempfile::tempdir().unwrap();
    let trace = toy_trace(dir.path(), "4");
    let t = trace.to_str().unwrap();
    let mut mean = json(&aid(&["analyze", t, "--heads", "mean"]))["manifest"].clone();
    let max = json(&aid(&["analyze", t, "--heads", "max"]))["manifest"].clone();
    assert_eq!(mean["head_policy"], "mean");
    assert_eq!(max["head_policy"], "max");
    mean["head_policy"] = max["head_policy"].clone();
    assert_eq!(mean, max);
}

#[test]
fn malformed_trace_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"version\": 1}").unwrap();
    assert_eq!(
        aid(&["analyze", path.to_str().unwrap()]).status.code(),
        Some(2)
    );
    assert_eq!(
        aid(&["analyze", "/nonexistent/trace.json"]).status.code(),
        Some(2)
    );
}

#[test]
fn toy_aid_keeps_plan_on_planted_seed() {
    let doc = json(&aid(&[
        "aid", "--toy", "--seed", "7", "--plant", "1", "--k", "1",
    ]));
    assert_eq!(doc["decision"]["keep"], true);
    assert_eq!(doc["plan"]["hijackers"], serde_json::json!([5]));
    assert_eq!(doc["final_tokens"].as_array().unwrap().len(), 4);
    assert_eq!(doc["manifest"]["seed"], 7);
}

#[test]
fn trace_aid_flags_pass_through() {
    let dir = tempfile::tempdir().unwrap();
    let trace = toy_trace(dir.path(), "4");
    let t = trace.to_str().unwrap();
    let empty = json(&aid(&["aid", "--trace", t, "--rho", "0"]));
    assert_eq!(empty["decision"]["delta"], 0.0);
    assert_eq!(empty["decision"]["keep"], false);
    let strict = json(&aid(&["aid", "--trace", t, "--strict"]));
    assert_eq!(strict["plan"]["strict"], true);
    assert_eq!(
        aid(&["aid", "--trace", t, "--rho", "1.5"]).status.code(),
        Some(2)
    );
}

#[test]
fn sweep_default_grid_starts_from_empty_plan() {
    let dir = tempfile::tempdir().unwrap();
    let trace = toy_trace(dir.path(), "4");
    let out = aid(&["sweep", "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert!(text.starts_with("# {"));
    assert_eq!(
        text.lines().nth(1).unwrap(),
        "rho,delta,hijacker_total,kept"
    );
    let rows = csv_body(&out.stdout);
    let rhos: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(rhos, ["0", "0.25", "0.5", "0.75", "1"]);
    assert_eq!(rows[0][1], "0");
    assert_eq!(rows[0][3], "false");
}

#[test]
fn strict_full_sweep_nullifies_hijackers() {
    let dir = tempfile::tempdir().unwrap();
    let trace = toy_trace(dir.path(), "4");
    let out = aid(&[
        "sweep",
        "--trace",
        trace.to_str().unwrap(),
        "--strict",
        "--fractions",
        "1",
    ]);
    let rows = csv_body(&out.stdout);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][2], "0");
}

#[test]
fn oracle_check_exit_codes() {
    let ok = aid(&["oracle-check", "--count", "100", "--seed", "1"]);
    assert_eq!(ok.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(doc["passed"], true);
    assert!(doc["worst_seed"].is_u64());
    let too_big = aid(&["oracle-check", "--layers", "9"]);
    assert_eq!(too_big.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&too_big.stderr).contains("instance too large"));
}

#[test]
fn seed_comes_from_environment_when_flag_absent() {
    let run = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_aid"));
        c.args(args).env_remove("AID_SEED");
        if let Some(v) = env {
            c.env("AID_SEED", v);
        }
        json(&c.output().unwrap())
    };
    let from_env = run(Some("11"), &["decode"]);
    let from_flag = run(None, &["decode", "--seed", "11"]);
    assert_eq!(from_env, from_flag);
    let flag_wins = run(Some("11"), &["decode", "--seed", "12"]);
    assert_eq!(flag_wins["manifest"]["seed"], 12);
}

#[test]
fn planting_failure_exits_3() {
    // Head dimension 1 leaves no room for the planted directions.
    let out = aid(&[
        "aid",
        "--toy",
        "--plant",
        "0",
        "--d-model",
        "2",
        "--attn-heads",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn decode_length_cap_exits_2() {
    let out = aid(&["decode", "--max-seq-len", "8", "--steps", "2"]);
    assert_eq!(out.status.code(), Some(2));
}
