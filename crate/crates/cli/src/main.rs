//! `hrvc`: config-driven runs of the HR-window Conformer toolkit.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hrvconformer::Error;

#[derive(Debug, Parser)]
#[command(name = "hrvc", version, about = "ECG to HR windows to Conformer classification")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Seed for synthesis, initialisation and training (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Record that bitwise-reproducible execution was requested. Every
    /// command already runs single-threaded with seeded randomness.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Replace an existing output directory from a previous run.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic ECG corpora or a toy HR-window store.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// clean | artifacts | inverted | toy (overrides synth.preset).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Detect R peaks and correct RR intervals for ECG CSV files.
    Detect {
        #[arg(long)]
        out: PathBuf,
        /// Use the unenhanced detector preset.
        #[arg(long)]
        standard: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Turn corrected RR files into a labelled window store.
    Preprocess {
        /// Label table with header `subject,epoch_hour,grade`.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corrected RR files named `<subject>.rr.csv`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train a model on a window store.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Separate validation store; otherwise a stratified split of `data`.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained run on a window store.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention statistics and rollout relevance of a trained run.
    Attn {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
