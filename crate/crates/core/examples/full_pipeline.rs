//! Every pipeline stage against a run directory, with simulated annotators
//! standing in for people. Mirrors the `relabel` command sequence.
//!
//! cargo run --example full_pipeline [-- <run-dir>]

use std::path::PathBuf;

use relabel::fixture::{generate, FixtureConfig};
use relabel::metrics::MoeMode;
use relabel::pipeline::{ingest_fixture, BatchOptions, RunDir};
use relabel::proposals::EmptySetPolicy;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().join("run"));
    let inputs = tmp.path().join("in");
    let run = RunDir::new(&root);

    ingest_fixture(&run, &inputs, &generate(&FixtureConfig::default()))?;
    let selection = run.select_model(EmptySetPolicy::Exclude, false)?;
    println!("proposal model: {} (ReaL {:.4})", selection.best.model_id, selection.best.real_accuracy);
    run.propose(20, false)?;
    run.make_batches(
        &BatchOptions {
            roster: inputs.join("roster.jsonl"),
            num_batches: 7,
            per_batch: 2,
            seed: 2024,
        },
        false,
    )?;
    let truth = inputs.join("truth.jsonl");
    println!("initial: {:?}", run.simulate(&truth, 0.1, 1)?);
    let summary = run.analyze_agreement(false)?;
    println!("agreement: {} agreed, {} to refine", summary.agreed, summary.needs_refinement);
    run.assign_refinement(None, false)?;
    println!("refinement: {:?}", run.simulate(&truth, 0.1, 1)?);
    let labels = run.finalize(false)?;
    println!("final labels for {} images", labels.len());
    println!("triage: {:?}", run.simulate(&truth, 0.1, 1)?);
    for file in run.report(MoeMode::Wald, EmptySetPolicy::Exclude, false)? {
        println!("wrote {}", root.join(file).display());
    }
    let stages: Vec<String> = run.manifest()?.stages.iter().map(|s| s.stage.to_string()).collect();
    println!("manifest stages: {}", stages.join(" -> "));
    Ok(())
}
