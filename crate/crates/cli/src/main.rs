//! `oobnet`: train, evaluate and apply the out-of-body frame classifier.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use oobnet_core::RedactionMode;

/// Exit status for a failed run.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<oobnet_core::Error> for Failure {
    fn from(e: oobnet_core::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "oobnet", version, about = "Out-of-body frame detection and redaction for endoscopic video")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the epoch with the best validation F1
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test and external groups of a split
    Eval(EvalArgs),
    /// Write per-frame probabilities for one video
    Predict(PredictArgs),
    /// Black out, blur or delete out-of-body frames of one video
    Redact(RedactArgs),
    /// Dataset statistics as CSV
    Stats(StatsArgs),
    /// Write a seeded synthetic dataset
    Synth(SynthArgs),
}

fn parse_threshold(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err(format!("threshold must lie strictly between 0 and 1, got {t}"))
    }
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

fn parse_lr(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("learning rate must be a positive number, got {s:?}")),
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModelPreset {
    /// Micro backbone for 64x64 input, 32 LSTM units
    Desk,
    /// Tiny network for smoke tests
    Tiny,
    /// Full-width backbone, 640 LSTM units
    MobilenetV2,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Blackout,
    Blur,
    Delete,
}

impl From<ModeArg> for RedactionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Blackout => RedactionMode::Blackout,
            ModeArg::Blur => RedactionMode::Blur,
            ModeArg::Delete => RedactionMode::Delete,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Split file; defaults to DATA_DIR/split.json
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64, value_parser = parse_positive)]
    pub clip_len: usize,
    #[arg(long, default_value_t = 0.00009, value_parser = parse_lr)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = ModelPreset::Desk)]
    pub model: ModelPreset,
    /// Per-epoch CSV log; defaults to OUT with a .log.csv suffix
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Split file; defaults to DATA_DIR/split.json
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5, value_parser = parse_threshold)]
    pub threshold: f64,
    #[arg(long, default_value_t = 64, value_parser = parse_positive)]
    pub clip_len: usize,
    /// JSON report path; printed to stdout when omitted
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub video_dir: PathBuf,
    #[arg(long)]
    pub out_trace: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = parse_threshold)]
    pub threshold: f64,
    #[arg(long, default_value_t = 64, value_parser = parse_positive)]
    pub clip_len: usize,
}

#[derive(Args)]
pub struct RedactArgs {
    /// Trace CSV from `predict`
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub trace: Option<PathBuf>,
    /// Predict on the fly with this checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub video_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Blur)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    pub margin: usize,
    /// Box blur width (odd, at least 9)
    #[arg(long, default_value_t = 15)]
    pub blur_kernel: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Used with --checkpoint
    #[arg(long, default_value_t = 0.5, value_parser = parse_threshold)]
    pub threshold: f64,
    #[arg(long, default_value_t = 64, value_parser = parse_positive)]
    pub clip_len: usize,
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Split file; defaults to DATA_DIR/split.json
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// CSV path; printed to stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub train: usize,
    #[arg(long, default_value_t = 10)]
    pub validation: usize,
    #[arg(long, default_value_t = 10)]
    pub test: usize,
    /// Videos in an extra "external" group from a separate center
    #[arg(long, default_value_t = 0)]
    pub external: usize,
    #[arg(long, default_value_t = 270)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 330)]
    pub max_frames: usize,
    #[arg(long, default_value_t = 64)]
    pub frame_size: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Redact(a) => commands::redact(a),
        Command::Stats(a) => commands::stats(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
