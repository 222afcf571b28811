use std::process::Command;

use serde_json::Value;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

#[test]
fn writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (json, csv) = (dir.path().join("r.json"), dir.path().join("r.csv"));
    let status = bench()
        .args(["het-ablation", "--out"])
        .arg(&json)
        .arg("--csv")
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["scenario"], "het-ablation");
    assert_eq!(doc["passed"], true);
    let mut rows = csv::Reader::from_path(&csv).unwrap();
    assert_eq!(rows.headers().unwrap().get(7), Some("slot_digest"));
    assert_eq!(rows.records().count(), doc["records"].as_array().unwrap().len());
}

#[test]
fn stream_scenario_honors_flags() {
    let out = bench()
        .args(["stream", "--depth", "4", "--ticks", "40", "--mode", "global-reset"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS stream/ran: 16 completions"), "{text}");
}

#[test]
fn rejects_unknown_mode() {
    let out = bench().args(["stream", "--mode", "bogus"]).output().unwrap();
    assert!(!out.status.success());
}
