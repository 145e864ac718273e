mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mamba_home::par::with_threads;

use commands::EvalSource;
use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while computing or writing results; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl From<mamba_home::Error> for CliError {
    fn from(e: mamba_home::Error) -> Self {
        match e {
            mamba_home::Error::Config(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mamba-home", version, about = "Mamba-HoME segmentation: checks, benchmarks, training and evaluation")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` (and MAMBA_HOME_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores. Overrides MAMBA_HOME_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Network preset: desk, tiny or paper.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Directory for every file a command writes.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of every module.
    Gradcheck {
        /// Negative control: hide part of this module's loss from the tape.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Routing wall time over an N sweep at fixed group size.
    Bench {
        /// CSV destination (default: <out_dir>/bench.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train on synthetic volumes; writes history.csv and a checkpoint.
    Train,
    /// Score a checkpoint on held-out synthetic volumes, or a label pair.
    Eval {
        #[arg(long, conflicts_with_all = ["pred", "gt"], required_unless_present = "pred")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Label classes including background (default: largest label + 1).
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Stage shapes, routing schedule and parameter count.
    Describe {
        /// Input extent D H W (default: the [data] extent).
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
        extent: Option<Vec<usize>>,
    },
    /// Write synthetic image and label volumes.
    Synth {
        #[arg(long)]
        count: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        preset: cli.preset,
        out_dir: cli.out_dir,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let command = cli.command;
    with_threads(cfg.threads, || match command {
        Command::Gradcheck { corrupt } => commands::gradcheck(&cfg, corrupt.as_deref()),
        Command::Bench { csv } => commands::bench(&cfg, csv.as_deref()),
        Command::Train => commands::train(&cfg),
        Command::Eval {
            checkpoint,
            pred,
            gt,
            classes,
        } => {
            let source = match (checkpoint, pred, gt) {
                (Some(ck), _, _) => EvalSource::Checkpoint(ck),
                (None, Some(pred), Some(gt)) => EvalSource::Pair { pred, gt, classes },
                _ => return Err(CliError::Validation("eval needs --checkpoint or --pred with --gt".into())),
            };
            commands::eval(&cfg, source)
        }
        Command::Describe { extent } => {
            let extent = extent.map(|e| [e[0], e[1], e[2]]);
            commands::describe_cmd(&cfg, extent)
        }
        Command::Synth { count } => commands::synth(&cfg, count),
    })
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
