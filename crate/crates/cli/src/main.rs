//! `speechbci`: synthesize data, train, evaluate, run an online replay
//! session and benchmark decoding.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric error.

mod checkpoint;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<speechbci::Error> for CliError {
    fn from(e: speechbci::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

macro_rules! via_core_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                speechbci::Error::from(e).into()
            }
        }
    )*};
}

via_core_error!(
    speechbci::diffusion::ModelError,
    speechbci::dsp::DspError,
    speechbci::online::SessionError,
    speechbci::synth::SynthError,
    speechbci::train::TrainError
);

#[derive(Debug, Parser)]
#[command(name = "speechbci", version, about = "Imagined-speech EEG decoding: synth, train, eval, online, bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run a closed-loop session against a sample stream.
    Online(OnlineArgs),
    /// Measure single-window decode latency.
    Bench(BenchArgs),
    /// Stream a dataset over TCP to one client, as a recording would arrive.
    Serve(ServeArgs),
    /// Print the preprocessing filter coefficients.
    Filters(FiltersArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub trials_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 500.0)]
    pub fs: f64,
    #[arg(long, default_value_t = 1.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    /// Also write the per-epoch history table here.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub topk: usize,
    /// Also write the confusion matrix here.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    /// Also write per-trial predictions here.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OnlineArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `file:PATH` (or a bare path), `tcp:HOST:PORT`, or `synth`.
    #[arg(long)]
    pub source: String,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Seeds the cue draw and trial noise of the `synth` source.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write per-trial predictions (no timing) here.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Release replayed samples at the sampling rate instead of as fast as possible.
    #[arg(long)]
    pub realtime: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
}

#[derive(Debug, Args)]
pub struct FiltersArgs {
    #[arg(long, default_value_t = 500.0)]
    pub fs: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Online(a) => commands::online(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Serve(a) => commands::serve(&a),
        Command::Filters(a) => commands::filters(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
