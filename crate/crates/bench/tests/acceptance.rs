//! One pass/fail line per primary acceptance criterion. Exits nonzero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ringflow_bench::*;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    /// Check-name prefixes that must all pass; an empty list means every check.
    checks: &'static [&'static str],
    run: fn(&Fixture) -> ScenarioResult,
}

fn judge(c: &Criterion, fx: &Fixture) -> (bool, String) {
    let start = Instant::now();
    let result = (c.run)(fx);
    let elapsed = start.elapsed();
    let selected: Vec<&Check> = result
        .checks
        .iter()
        .filter(|k| c.checks.is_empty() || c.checks.iter().any(|p| k.name.starts_with(p)))
        .collect();
    let missing: Vec<&&str> = c
        .checks
        .iter()
        .filter(|p| !result.checks.iter().any(|k| k.name.starts_with(**p)))
        .collect();
    let failed: Vec<String> = selected
        .iter()
        .filter(|k| !k.passed)
        .map(|k| format!("{} ({})", k.name, k.detail))
        .collect();
    let in_budget = c.budget.is_none_or(|b| elapsed <= b);
    let ok = !selected.is_empty() && missing.is_empty() && failed.is_empty() && in_budget;
    let mut detail = format!("{} checks, {:.2?}", selected.len(), elapsed);
    if !missing.is_empty() {
        detail.push_str(&format!("; missing {missing:?}"));
    }
    if !failed.is_empty() {
        detail.push_str(&format!("; failed {}", failed.join("; ")));
    }
    if !in_budget {
        detail.push_str(&format!("; over budget {:?}", c.budget.unwrap()));
    }
    (ok, detail)
}

fn main() -> ExitCode {
    let fx = Fixture::default();
    let criteria = [
        Criterion {
            name: "throughput law",
            budget: Some(Duration::from_secs(5)),
            checks: &["interval_depth_1", "interval_depth_2", "interval_depth_4", "interval_depth_8"],
            run: |fx| run_depth_sweep(fx, &[1, 2, 4, 8], 200),
        },
        Criterion {
            name: "per-request step function",
            budget: Some(Duration::from_secs(5)),
            checks: &[
                "step_function_denoise@8",
                "step_function_prompt@8",
                "step_function_hint@8",
                "step_function_source@8",
                "step_function_timbre@8",
            ],
            run: |fx| run_propagation_suite(fx, 8),
        },
        Criterion {
            name: "shared-mutable signature",
            budget: None,
            checks: &["onset_sde_curve@8", "plateau_sde_curve@8", "plateau_x0_target@8"],
            run: |fx| run_propagation_suite(fx, 8),
        },
        Criterion {
            name: "migration signature",
            budget: None,
            checks: &[],
            run: |fx| run_migration(fx, 8),
        },
        Criterion {
            name: "global-reset ablation",
            budget: Some(Duration::from_secs(10)),
            checks: &[],
            run: |fx| run_het_ablation(fx, 8),
        },
        Criterion {
            name: "weight swap",
            budget: None,
            checks: &["onset_weights@1", "onset_weights@8"],
            run: |fx| run_propagation_suite(fx, 8),
        },
        Criterion {
            name: "windowed decode",
            budget: Some(Duration::from_secs(10)),
            checks: &[],
            run: |fx| run_windowed_codec_check(fx, 50),
        },
        Criterion {
            name: "similarity filter",
            budget: None,
            checks: &["held_conditioning_skips", "changed_not_skipped_"],
            run: |fx| run_propagation_suite(fx, 8),
        },
        Criterion {
            name: "gradient studies",
            budget: None,
            checks: &[],
            run: |fx| run_gradient_suite(fx, &[1, 2, 3, 4, 5]),
        },
        Criterion {
            name: "streaming parity",
            budget: None,
            checks: &[],
            run: |fx| run_parity(fx, 8),
        },
        Criterion {
            name: "solver identities",
            budget: None,
            checks: &[],
            run: run_solver_identities,
        },
    ];
    let mut failures = 0;
    for c in &criteria {
        let (ok, detail) = judge(c, &fx);
        println!("{} {}: {detail}", if ok { "PASS" } else { "FAIL" }, c.name);
        failures += usize::from(!ok);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
