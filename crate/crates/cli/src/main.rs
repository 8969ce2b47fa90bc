//! `gamlab`: tokenizer training, model training and evaluation, and the
//! single-block scaling benchmark.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or
//! configuration error. Failures print one JSON object on standard error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gamlab_core::{kernels, Arch, Error, GamVariant};

#[derive(Parser, Debug)]
#[command(
    name = "gamlab",
    version,
    about = "Gated associative memory language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a byte-level BPE vocabulary.
    TokenizerTrain(TokenizerTrainArgs),
    /// Train a language model from a JSON run configuration.
    Train(TrainArgs),
    /// Report validation loss and perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Time and measure single blocks across sequence lengths.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct TokenizerTrainArgs {
    /// Corpus files or directories.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Arch>,
    /// GAM ablation variant; invalid with the transformer.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<GamVariant>,
    /// Seeds both initialization and data order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Build the model and write the manifest without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Validation text files or directories.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Defaults to `tokenizer.json` beside the checkpoint.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "gam,transformer", value_parser = parse_arch)]
    pub archs: Vec<Arch>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "256,512,1024,2048,4096,8192"
    )]
    pub seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 512)]
    pub d_model: usize,
    /// Defaults to `d_model`.
    #[arg(long)]
    pub num_slots: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub n_head: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    /// Tracked-memory cap per measurement; larger points are skipped.
    #[arg(long)]
    pub mem_limit_mb: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<GamVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure with its exit code.
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) => (2, "config"),
            Error::Io(_) => (1, "io"),
            Error::Parse(_) => (1, "parse"),
            Error::Input(_) => (1, "input"),
            Error::Numeric(_) => (1, "numeric"),
            Error::SequenceLength { .. } => (1, "sequence_length"),
            Error::Index { .. } => (1, "index"),
            Error::Dimension { .. } | Error::Contract(_) => (1, "internal"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("GAMLAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        kernels::set_num_threads(n);
    }
    let result = match cli.command {
        Command::TokenizerTrain(a) => commands::tokenizer_train(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": f.kind, "message": f.message });
            eprintln!("{line}");
            ExitCode::from(f.code)
        }
    }
}
