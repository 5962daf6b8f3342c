//! `freegrain`: generate, prune, train, evaluate and inspect free-grain
//! hierarchical classification experiments.
//!
//! Every command writes its outputs plus `<out>.manifest.json`. Exit codes:
//! 0 success, 1 input error, 2 numeric error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "freegrain", version, about = "Free-grain hierarchical classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a taxonomy with the given level sizes.
    GenTaxonomy(GenTaxonomyArgs),
    /// Generate a fully labeled synthetic dataset.
    GenData(GenDataArgs),
    /// Attach synthetic unit text embeddings to a fully labeled dataset.
    AttachText(AttachTextArgs),
    /// Remove labels by correctness flags or by an a-b-c availability spec.
    Prune(PruneArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file against a labeled dataset.
    Eval(EvalArgs),
    /// Write per-sample predictions, optionally stopped at the deepest consistent level.
    Infer(InferArgs),
    /// Summarize label granularity of a dataset.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Shape {
    /// Children split evenly over parents.
    Balanced,
    /// Random tree in which every parent keeps at least one child.
    Random,
}

#[derive(Args, Serialize)]
struct GenTaxonomyArgs {
    /// Level sizes, coarsest first.
    #[arg(long, default_value = "4-12-48")]
    sizes: String,
    #[arg(long, value_enum, default_value = "balanced")]
    shape: Shape,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long, default_value_t = 60)]
    per_leaf: usize,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    /// Expected norm of the per-sample feature noise.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0.6)]
    hier_corr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also split off a stratified held-out set and write it here.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    heldout_fraction: f64,
}

#[derive(Args, Serialize)]
struct AttachTextArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 32)]
    text_dim: usize,
    #[arg(long, default_value_t = 0.9)]
    informativeness: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum PruneMode {
    Semantic,
    Random,
}

#[derive(Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Serialize)]
struct PruneArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: PruneMode,
    /// Availability percentages per level for random mode, e.g. 100-50-10.
    #[arg(long)]
    spec: Option<String>,
    /// Correctness flags (JSON Lines) for semantic mode.
    #[arg(long)]
    flags: Option<PathBuf>,
    /// Zero-shot scores (JSON Lines) to derive flags from, for semantic mode.
    #[arg(long, conflicts_with = "flags")]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Spread random removals evenly over finest classes.
    #[arg(long, value_enum, default_value = "on")]
    stratify: OnOff,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Training configuration (JSON); omitted fields take the regime defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Held-out set scored after every epoch; without it a split of `--data` is used.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log (JSON).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    /// Fully labeled evaluation set.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Emit the longest taxonomy-consistent prefix instead of raw logits.
    #[arg(long)]
    stop: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<freegrain::Error>())
        .any(freegrain::Error::is_numeric);
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
