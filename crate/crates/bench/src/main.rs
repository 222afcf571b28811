use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use ringflow_bench::*;
use ringflow_core::pipeline::Mode;
use serde_json::json;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scenario {
    DepthSweep,
    Propagation,
    Migration,
    HetAblation,
    Gradient,
    Codec,
    Parity,
    Identities,
    Stream,
    CalibrateEps,
    All,
}

/// Run deterministic streaming scenarios and report pass/fail checks.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Args {
    scenario: Scenario,
    /// Ring depth (number of slots).
    #[arg(long, default_value_t = 8)]
    depth: usize,
    /// Refinement steps per submission.
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 1528)]
    seed: u64,
    #[arg(long, default_value = "per-slot")]
    mode: Mode,
    /// Ticks for the stream and depth-sweep scenarios.
    #[arg(long, default_value_t = 200)]
    ticks: usize,
    /// Seeds for the gradient studies.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
    seeds: Vec<u64>,
    /// Write the full JSON result here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-tick records as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn run(args: &Args, fx: &Fixture, scenario: Scenario) -> Vec<ScenarioResult> {
    let depths: Vec<usize> = (1..=args.steps).collect();
    match scenario {
        Scenario::DepthSweep => vec![run_depth_sweep(fx, &depths, args.ticks)],
        Scenario::Propagation => vec![run_propagation_suite(fx, args.depth)],
        Scenario::Migration => vec![run_migration(fx, args.depth)],
        Scenario::HetAblation => vec![run_het_ablation(fx, args.depth)],
        Scenario::Gradient => vec![run_gradient_suite(fx, &args.seeds)],
        Scenario::Codec => vec![run_windowed_codec_check(fx, 50)],
        Scenario::Parity => vec![run_parity(fx, args.depth)],
        Scenario::Identities => vec![run_solver_identities(fx)],
        Scenario::Stream => vec![run_stream(fx, args.depth, args.mode, args.ticks)],
        Scenario::CalibrateEps => {
            let eps = calibrate_eps_flat(fx);
            vec![ScenarioResult::new(
                "calibrate-eps",
                json!({ "fixture": fx, "seeds": [CALIBRATION_SEEDS.start, CALIBRATION_SEEDS.end] }),
                Vec::new(),
                json!({ "eps_flat": eps, "pinned": EPS_FLAT }),
                vec![Check::new("pinned_covers_calibration", eps <= EPS_FLAT, format!("{eps:.4} vs {EPS_FLAT}"))],
                json!({}),
            )]
        }
        Scenario::All => [
            Scenario::DepthSweep,
            Scenario::Propagation,
            Scenario::Migration,
            Scenario::HetAblation,
            Scenario::Gradient,
            Scenario::Codec,
            Scenario::Parity,
            Scenario::Identities,
        ]
        .into_iter()
        .flat_map(|s| run(args, fx, s))
        .collect(),
    }
}

fn write_csv(path: &PathBuf, results: &[ScenarioResult]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("create {}", path.display()))?;
    w.write_record(["scenario", "run", "tick", "completions", "rms_vs_reference", "decode_skipped", "since_change", "slot_digest"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in results {
        for rec in &r.records {
            w.write_record([
                r.scenario.clone(),
                rec.run.clone(),
                rec.tick.to_string(),
                rec.completions.to_string(),
                opt(rec.rms_vs_reference.map(|v| v.to_string())),
                opt(rec.decode_skipped.map(|v| v.to_string())),
                opt(rec.since_change.map(|v| v.to_string())),
                rec.slot_digest.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn main() -> anyhow::Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let fx = Fixture {
        seed: args.seed,
        steps: args.steps,
        ..Fixture::default()
    };
    let results = run(&args, &fx, args.scenario);
    for r in &results {
        for c in &r.checks {
            println!("{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, r.scenario, c.name, c.detail);
        }
    }
    if let Some(path) = &args.out {
        let doc = if results.len() == 1 {
            serde_json::to_value(&results[0])?
        } else {
            json!({ "schema_version": SCHEMA_VERSION, "results": results })
        };
        std::fs::write(path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("write {}", path.display()))?;
    }
    if let Some(path) = &args.csv {
        write_csv(path, &results)?;
    }
    let ok = results.iter().all(|r| r.passed);
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
