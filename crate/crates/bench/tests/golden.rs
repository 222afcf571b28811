//! Tick-exact integer summaries pinned in tests/golden. Regenerate with
//! UPDATE_GOLDEN=1 after an intended behavior change.

use std::path::PathBuf;

use ringflow_bench::*;
use serde_json::{json, Value};

fn golden(name: &str, actual: Value) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.json"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&actual).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let expected: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(actual, expected, "golden {name} differs");
}

#[test]
fn depth_sweep_golden() {
    let fx = Fixture::default();
    let rows: Vec<Value> = (1..=8)
        .map(|d| {
            let s = depth_summary(&fx, d, 200);
            json!({ "depth": d, "completions": s.completions, "first_effect": s.first_effect_by_phase })
        })
        .collect();
    golden("depth_sweep", json!(rows));
}

#[test]
fn het_ablation_golden() {
    let r = run_het_ablation(&Fixture::default(), 8);
    let side = |k: &str| {
        let s = &r.summary[k];
        json!({
            "switch_completions": s["switch_completions"],
            "longest_dead_run": s["longest_dead_run"],
            "first_new_effect": s["first_new_effect"],
            "coexist_ticks": s["coexist_ticks"],
            "sweep_completions": s["sweep_completions"],
        })
    };
    golden("het_ablation", json!({ "per_slot": side("per_slot"), "global_reset": side("global_reset") }));
}

#[test]
fn propagation_golden() {
    let r = run_propagation_suite(&Fixture::default(), 8);
    let rows: Vec<Value> = r.summary["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|row| {
            let skipped: String = row["decode_skipped"]
                .as_array()
                .unwrap()
                .iter()
                .map(|b| if b.as_bool().unwrap() { 's' } else { 'd' })
                .collect();
            json!({
                "name": row["name"],
                "depth": row["depth"],
                "first_effect": row["first_effect"],
                "plateau": row["plateau"],
                "decode": skipped,
            })
        })
        .collect();
    golden("propagation", json!(rows));
}
