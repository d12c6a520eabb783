//! Command-line front end.

mod commands;
mod config;
pub mod toy;

pub use config::{parse_sampler, Paths, RunConfig};

use crate::error::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "kgdiff", version, about = "Graph-conditioned diffusion text generation")]
pub struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file, or output directory for `train`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Inputs {
    /// Line-delimited JSON dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// `element<TAB>alias` lines.
    #[arg(long)]
    pub aliases: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write `serialized-graph<TAB>text` per record.
    Serialize {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Build a vocabulary over serialized graphs and texts.
    BuildVocab {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        min_count: Option<usize>,
    },
    /// Link text mentions to graph elements.
    Align {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score predicted alignments against gold records.
    AlignScore {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write a schedule table (baseline, or the learned ones from a checkpoint).
    ScheduleBuild {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Recompute the single-token worked example and compare with its tables.
    ToyExample,
    Train {
        #[command(flatten)]
        inputs: Inputs,
        /// Override the number of optimizer steps.
        #[arg(long)]
        total_steps: Option<usize>,
    },
    Sample {
        #[command(flatten)]
        inputs: Inputs,
        /// `ddpm` or `ddim`.
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long)]
        ddim_steps: Option<usize>,
    },
    EvalFgt {
        #[command(flatten)]
        inputs: Inputs,
        /// Generated texts, one per dataset record.
        #[arg(long)]
        hyp: PathBuf,
        /// Comma-separated λ values.
        #[arg(long)]
        lambdas: Option<String>,
    },
    EvalEsr {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        hyp: PathBuf,
        /// Edited dataset from `edit-gen`.
        #[arg(long)]
        edited: PathBuf,
        /// Texts generated from the edited graphs.
        #[arg(long)]
        hyp_edited: PathBuf,
    },
    EvalBleu {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Replace one entity per graph with another corpus entity.
    EditGen {
        #[command(flatten)]
        inputs: Inputs,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::OutOfRange(_) => EXIT_USAGE,
        Error::Numerical(_) | Error::InfiniteSnr => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
