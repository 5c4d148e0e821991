//! Command-line front end: train, evaluate, predict and gradcheck.
//!
//! Exit status is 0 on success, 1 when the configuration, flags or input
//! files are invalid and 2 when a command fails while running.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "absa-seq", version, about = "Aspect and polarity triplet extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on `paths.train`, select on `paths.dev` and write the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `paths.checkpoint_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `training.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score greedy predictions of a checkpoint against an annotated dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotated dataset; defaults to `paths.test` of `--config`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Supplies `paths.test` and `training.max_aspects`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one `{"triplets": [...]}` line per input sentence.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Supplies `training.max_aspects`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full model gradient at 64-bit.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `gradcheck.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Test hook: scales the reverse-mode gradient so that the check fails.
        #[arg(long, hide = true)]
        corrupt_gradient: Option<f64>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn field(field: &str, msg: impl fmt::Display) -> Self {
        CliError::Validation(format!("invalid configuration: {field}: {msg}"))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<absa_seq::Error> for CliError {
    fn from(e: absa_seq::Error) -> Self {
        use absa_seq::Error::*;
        match e {
            Config { .. } | Parse { .. } | InvalidExample { .. } | EmptyCorpus | Io { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { config, out, seed } => commands::train(&config, out, seed),
        Command::Evaluate {
            checkpoint,
            data,
            config,
            out,
        } => commands::evaluate(&checkpoint, data, config.as_deref(), out.as_deref()),
        Command::Predict {
            checkpoint,
            data,
            config,
            out,
        } => commands::predict(&checkpoint, &data, config.as_deref(), out.as_deref()),
        Command::Gradcheck {
            config,
            seed,
            corrupt_gradient,
        } => commands::gradcheck(&config, seed, corrupt_gradient),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
