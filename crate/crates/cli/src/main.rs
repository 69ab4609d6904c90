//! `glonet` command-line tool.
//!
//! Exit codes: 0 success, 2 invalid input (spec, checkpoint/dataset mismatch,
//! checksum), 3 numeric fault during training, 4 I/O or file format errors.

mod commands;
mod csvplot;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::spec::Overrides;

#[derive(Debug, Parser)]
#[command(name = "glonet", version, about = "Train, sweep, profile and prune GloNet and baseline MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the spec's model once per seed.
    Train {
        spec: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Train every family × depth cell listed under `sweep`.
    Sweep {
        spec: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
        /// Parallel workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Block-output L1 profile of a checkpoint on the spec's test split.
    Profile {
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test rows to profile [default: min(5000, test rows)].
        #[arg(long)]
        sample_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test metric of a GloNet checkpoint truncated to k blocks, for every k.
    Prune {
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a history, summary, profile or prune CSV as SVG.
    Plot {
        csv: PathBuf,
        /// Output file [default: the CSV path with an .svg extension].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
    },
}

/// Values that override the spec file.
#[derive(Debug, Args)]
struct RunFlags {
    #[arg(long)]
    epochs: Option<usize>,
    /// Run this single seed instead of the spec's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            epochs: self.epochs,
            seed: self.seed,
            lr: self.lr,
            batch_size: self.batch_size,
            out: self.out.clone(),
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Lib(glonet::Error),
}

impl From<glonet::Error> for CliError {
    fn from(e: glonet::Error) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Lib(e) => e.fmt(f),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use glonet::Error as E;
        match self {
            CliError::Validation(_) => 2,
            CliError::Lib(e) => match e {
                E::Config(_) | E::Usage(_) | E::Dimension { .. } => 2,
                E::NumericFault(_) | E::DegenerateBatch(_) => 3,
                E::Adapter(_) | E::Format(_) | E::Data(_) | E::Io(_) | E::Json(_) | E::Csv(_) => 4,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { spec, flags } => commands::train(&spec, &flags.overrides(), flags.quiet),
        Command::Sweep { spec, flags, jobs } => commands::sweep(&spec, &flags.overrides(), jobs, flags.quiet),
        Command::Profile {
            spec,
            checkpoint,
            sample_size,
            out,
        } => commands::profile(&spec, &checkpoint, sample_size, out),
        Command::Prune { spec, checkpoint, out } => commands::prune(&spec, &checkpoint, out),
        Command::Plot { csv, out, title } => csvplot::plot(&csv, out, title),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
