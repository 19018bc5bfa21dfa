//! Command-line surface: argument parsing, config resolution, and exit-code
//! policy (0 success, 1 usage error, 2 pipeline failure).

pub mod archive;
pub mod commands;
pub mod config;
pub mod data;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::error::Result;

pub use archive::{ArchiveMeta, ModelArchive, ARCHIVE_VERSION};
pub use commands::{build_schedule, cmd_anchors, cmd_eval, cmd_prune, cmd_report, cmd_train};
pub use config::{
    AnchorsConfig, DatasetConfig, DatasetKind, EvalConfig, NetConfig, NetKindConfig, PruneConfig,
    RunConfig, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "prunenet",
    version,
    about = "Structured weight pruning for convolutional networks: \
             penalty-regularized pre-pruning, masked mapping, retraining, \
             compression accounting, and detection metrics"
)]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Train a desk-scale model from scratch and archive it.
    Train,
    /// Run the three-phase pruning pipeline on an archived model.
    Prune,
    /// Evaluate predictions or an archived model over the IoU sweep.
    Eval,
    /// Accounting report (params, FLOPs, storage) for an archive.
    Report,
    /// Cluster ground-truth box sizes into anchor priors.
    Anchors,
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cfg.out)?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Prune => cmd_prune(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Report => cmd_report(&cfg),
        Command::Anchors => cmd_anchors(&cfg),
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) if e.is_usage() => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
