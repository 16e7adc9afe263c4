//! `hstyle`: train, finetune, sample, mix and eval.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or config values),
//! 2 runtime failure. Failures print one line to standard error:
//! `error: kind=<kind> message=<text>`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "hstyle", version, about = "Style-adapted text-to-image diffusion at desk scale")]
pub struct Cli {
    /// Shared TOML file with optional [train], [sample] and [finetune] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the base stack (unless initialised from a checkpoint) and train the style adapters.
    Train(TrainArgs),
    /// Fit a residual sidecar to one or more style references.
    Finetune(FinetuneArgs),
    /// Generate one image from a prompt and optional style references.
    Sample(SampleArgs),
    /// Generate with low, mid and high style levels taken from three references.
    Mix(MixArgs),
    /// Generate and score every prompt and style pair of a test set.
    Eval(EvalArgs),
    /// Write the procedural toy corpus with a manifest.
    MakeCorpus(CorpusArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSONL manifest of `{"image_path", "caption"}` records.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and loss curves.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// desk, smoke or micro.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub pretrain_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Style reference images, repeated or comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub style: Vec<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub caption: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sidecar file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct SamplingFlags {
    /// Sidecar produced by `finetune`.
    #[arg(long)]
    pub residual: Option<PathBuf>,
    /// Multiplier on every adapter gain.
    #[arg(long)]
    pub alpha_scale: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub cfg: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Style references, repeated or comma separated; several are averaged.
    #[arg(long, value_delimiter = ',')]
    pub style: Vec<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    /// PNG to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub low: PathBuf,
    #[arg(long)]
    pub mid: PathBuf,
    #[arg(long)]
    pub high: PathBuf,
    /// Apply the sidecar even when the three references differ.
    #[arg(long)]
    pub force_residual: bool,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON `{"prompts": [...], "styles": [...]}`.
    #[arg(long)]
    pub testset: PathBuf,
    /// Text-similarity command, called with the image path and prompt; prints one number.
    #[arg(long)]
    pub embedder_cmd: Option<String>,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    /// Directory for generated images and `report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage message={}", one_line(first));
            eprint!("{rendered}");
            return ExitCode::from(1);
        }
    };
    let resolved = match commands::resolve(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: kind={} message={}", e.kind(), one_line(&e.to_string()));
            return ExitCode::from(1);
        }
    };
    println!("resolved config: {}", resolved.describe());
    match commands::execute(resolved) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} message={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(2)
        }
    }
}
