use std::io::{IsTerminal, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relabel::fixture::{self, FixtureConfig};
use relabel::metrics::MoeMode;
use relabel::pipeline::{self, BatchOptions, IngestInputs, PipelineError, RunDir};
use relabel::proposals::{EmptySetPolicy, DEFAULT_K};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "relabel", version, about = "Multi-label relabelling pipeline")]
struct Cli {
    /// Run directory holding the manifest, store, artifacts and reports.
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Force {
    /// Rerun a completed stage; later stages must then be rerun too.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Policy {
    /// Keep zero-label images in the ReaL denominator as misses.
    #[arg(long)]
    count_empty_as_wrong: bool,
}

impl Policy {
    fn get(&self) -> EmptySetPolicy {
        if self.count_empty_as_wrong {
            EmptySetPolicy::CountAsWrong
        } else {
            EmptySetPolicy::Exclude
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (inputs, roster and hidden truth).
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 6)]
        models: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Validate and store catalog, images, predictions and reference labels.
    Ingest {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        force: Force,
    },
    /// Pick the proposal model by ReaL accuracy on the reference.
    SelectModel {
        #[command(flatten)]
        policy: Policy,
        #[command(flatten)]
        force: Force,
    },
    /// Generate top-k proposals with the selected model.
    Propose {
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[command(flatten)]
        force: Force,
    },
    /// Split images into batches and assign annotators.
    MakeBatches {
        #[arg(long)]
        roster: PathBuf,
        #[arg(long, default_value_t = 7)]
        num_batches: usize,
        #[arg(long, default_value_t = 2)]
        per_batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        force: Force,
    },
    /// Start the annotation service and block.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Bearer key for stage control; stage endpoints are disabled without it.
        #[arg(long)]
        admin_key: Option<String>,
    },
    /// Apply submissions from a line-delimited JSON file.
    ImportAnnotations {
        #[arg(long)]
        file: PathBuf,
    },
    /// Apply zero-label triage records from a line-delimited JSON file.
    ImportTriage {
        #[arg(long)]
        file: PathBuf,
    },
    /// Let simulated annotators work the open stage (or triage once final).
    Simulate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        error_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Close the initial stage and write the agreement report and queue.
    AnalyzeAgreement {
        #[command(flatten)]
        force: Force,
    },
    /// Slice the refinement queue over experienced annotators.
    AssignRefinement {
        #[arg(long, value_delimiter = ',')]
        refiners: Option<Vec<String>>,
        #[command(flatten)]
        force: Force,
    },
    /// Close refinement and write final labels.
    Finalize {
        #[command(flatten)]
        force: Force,
    },
    /// Write distribution, heatmap, regression and triage reports.
    Report {
        /// Use the literal 1.96 * sqrt(p(1-p)) / n half-width.
        #[arg(long)]
        moe_as_written: bool,
        #[command(flatten)]
        policy: Policy,
        #[command(flatten)]
        force: Force,
    },
}

fn print<T: Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("serializable output");
    // A closed pipe downstream is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let dir = RunDir::new(&cli.run);
    match cli.command {
        Command::MakeFixture {
            out,
            images,
            classes,
            models,
            seed,
        } => {
            let fx = fixture::generate(&FixtureConfig {
                n_images: images,
                n_classes: classes,
                n_models: models,
                seed,
                ..FixtureConfig::default()
            });
            pipeline::write_fixture(&out, &fx)?;
            print(&serde_json::json!({"out": out, "images": images, "classes": classes, "models": models}));
        }
        Command::Ingest {
            catalog,
            images,
            predictions,
            reference,
            force,
        } => print(&dir.ingest(
            &IngestInputs {
                catalog,
                images,
                predictions,
                reference,
            },
            force.force,
        )?),
        Command::SelectModel { policy, force } => {
            let sel = dir.select_model(policy.get(), force.force)?;
            print(&serde_json::json!({"selected": sel.best, "leaderboard": sel.leaderboard}));
        }
        Command::Propose { k, force } => {
            print(&serde_json::json!({"images": dir.propose(k, force.force)?, "k": k}));
        }
        Command::MakeBatches {
            roster,
            num_batches,
            per_batch,
            seed,
            force,
        } => {
            dir.make_batches(
                &BatchOptions {
                    roster,
                    num_batches,
                    per_batch,
                    seed,
                },
                force.force,
            )?;
            print(&dir.manifest()?.batch_layout);
        }
        Command::Serve { addr, admin_key } => {
            let state = dir.service_state(admin_key)?;
            let rt = tokio::runtime::Runtime::new().map_err(|source| PipelineError::Io {
                path: "tokio runtime".into(),
                source,
            })?;
            rt.block_on(relabel::api::serve(state, addr))
                .map_err(|source| PipelineError::Io {
                    path: addr.to_string(),
                    source,
                })?;
        }
        Command::ImportAnnotations { file } => {
            print(&serde_json::json!({"created": dir.import_annotations(&file)?}));
        }
        Command::ImportTriage { file } => {
            print(&serde_json::json!({"created": dir.import_triage(&file)?}));
        }
        Command::Simulate { truth, error_rate, seed } => print(&dir.simulate(&truth, error_rate, seed)?),
        Command::AnalyzeAgreement { force } => print(&dir.analyze_agreement(force.force)?),
        Command::AssignRefinement { refiners, force } => {
            print(&dir.assign_refinement(refiners.as_deref(), force.force)?);
        }
        Command::Finalize { force } => {
            let labels = dir.finalize(force.force)?;
            print(&serde_json::json!({"images": labels.len()}));
        }
        Command::Report {
            moe_as_written,
            policy,
            force,
        } => {
            let moe = if moe_as_written { MoeMode::AsWritten } else { MoeMode::Wald };
            print(&dir.report(moe, policy.get(), force.force)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
