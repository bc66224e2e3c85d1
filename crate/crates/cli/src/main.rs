//! `citycond`: generate data, train, transfer, run matrices and report.
//!
//! Exit codes: 0 success, 2 usage, 3 config, 4 data, 5 run failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use citycond::{BackboneKind, ErrorCategory, Variant};

#[derive(Parser, Debug)]
#[command(
    name = "citycond",
    version,
    about = "City-conditioned forecasting experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic dataset to a directory.
    GenerateData(RunArgs),
    /// Train one config and save its result, resolved config and checkpoint.
    Train(RunArgs),
    /// Re-evaluate a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Cross-city run: train on one city, adapt on another.
    Transfer(TransferArgs),
    /// Run every config of the `[matrix]` grid.
    Matrix(RunArgs),
    /// Reduce result files to a seed-aggregated table.
    Aggregate(AggregateArgs),
    /// Render an aggregated table and its plot data.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on this fraction of training windows (low-data regime).
    #[arg(long)]
    frac: Option<f64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    backbone: Option<BackboneKind>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted `key=value` config overrides, applied before the flags.
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory written by `train` or `transfer`.
    run_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Where to write the metrics; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    /// Result files (newline-delimited JSON).
    #[arg(required = true)]
    results: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Steps per day, for attention time-of-day buckets.
    #[arg(long, default_value_t = 96)]
    period: usize,
    #[arg(long, default_value_t = 8)]
    buckets: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Table written by `aggregate` (`.json`) or a `table.csv`.
    table: PathBuf,
    /// text, csv or structured.
    #[arg(long, default_value = "text")]
    format: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::Config => 3,
        ErrorCategory::Data => 4,
        ErrorCategory::Run => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenerateData(a) => commands::generate_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Transfer(a) => commands::transfer(&a),
        Command::Matrix(a) => commands::matrix(&a),
        Command::Aggregate(a) => commands::aggregate(&a),
        Command::Report(a) => commands::report(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.category()))
        }
    }
}
