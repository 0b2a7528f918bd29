//! The `eqar` command line: dataset generation, tokenizer and generator
//! training, sampling, analysis reports and the HTTP service.

pub mod commands;
pub mod config;
pub mod rundir;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

pub use config::RunConfig;

/// Environment variable naming the default checkpoint directory.
pub const CHECKPOINT_ENV: &str = "EQAR_CHECKPOINT";

/// Exit status for a configuration that fails the schema.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for a checkpoint that is absent or unreadable.
pub const EXIT_CHECKPOINT: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration; `pointer` locates the offending field.
    Config { pointer: String, message: String },
    MissingCheckpoint { path: PathBuf, message: String },
    Other(anyhow::Error),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self::Config { pointer: String::new(), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => EXIT_CONFIG,
            Self::MissingCheckpoint { .. } => EXIT_CHECKPOINT,
            Self::Other(_) => 1,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Self::Config { pointer, message } => json!({"error": "config", "pointer": pointer, "message": message}),
            Self::MissingCheckpoint { path, message } => {
                json!({"error": "checkpoint", "path": path.display().to_string(), "message": message})
            }
            Self::Other(e) => json!({"error": "runtime", "message": format!("{e:#}")}),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Other(e)
    }
}

impl From<eqar_core::Error> for CliError {
    fn from(e: eqar_core::Error) -> Self {
        Self::Other(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Other(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "eqar", version, about = "Equivariant autoregressive image modeling")]
pub struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `train.epochs=30`; repeatable, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Parent directory for new run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Write into exactly this directory instead of a fresh `run-…` one.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the configured synthetic corpus to disk.
    DatasetGen,
    /// Train the learned tokenizer (`tokenizer.codec.kind = conv`).
    TokTrain,
    /// Train a generator and write its checkpoint with EMA weights.
    GenTrain,
    /// Generate images from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `sampler.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Class ids to sample, one image each; defaults to every class.
        #[arg(long, value_delimiter = ',')]
        class: Vec<usize>,
    },
    /// Evaluation reports.
    Analyze {
        #[command(subcommand)]
        report: Report,
    },
    /// Serve the interactive API (bind address from `EQAR_BIND`).
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
    },
}

#[derive(Debug, Subcommand)]
pub enum Report {
    /// Per-position held-out losses against the training mask.
    ZeroShot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Improvement matrix of single-task runs over a multi-task baseline.
    Transfer,
    /// Attention pair counts and FLOPs per variant.
    Flops,
    /// Column statistics of long generated sequences.
    Stationarity {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Projection Fréchet distance between samples and held-out images.
    Dist {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Parse `args` (including the program name), run, and return the exit code.
/// Errors are printed to stderr as one JSON line.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(dir) => {
            if let Some(dir) = dir {
                println!("{}", dir.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
