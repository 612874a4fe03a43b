//! Command-line front end: dataset ingestion, feature caching, training,
//! evaluation, prediction, cost estimation and graph inspection.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "iqa", version, about = "Blind quality assessment for very large images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset CSV with columns path, mos, split.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image or feature cache for `predict` and `inspect-graph`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Two-pass test-time augmentation.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub tta: Toggle,
    /// Overrides the `seed` config key.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write feature caches for every manifest entry.
    Encode(CommonArgs),
    /// Train and keep the checkpoint with the best validation SRCC.
    Train(CommonArgs),
    /// PLCC, SRCC and RMSE of a checkpoint on the evaluation split.
    Eval(CommonArgs),
    /// Score one image or feature cache.
    Predict(CommonArgs),
    /// Operation and memory estimates for the configured model.
    Cost(CommonArgs),
    /// Dump the canonical graph of one input as `src dst affinity` lines.
    InspectGraph(CommonArgs),
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Encode(a)
            | Command::Train(a)
            | Command::Eval(a)
            | Command::Predict(a)
            | Command::Cost(a)
            | Command::InspectGraph(a) => a,
        }
    }
}

/// Loads and validates the configuration, then runs the command.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let args = cli.command.args();
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    let tta = args.tta == Toggle::On;
    let (manifest, out, ckpt, input) = (
        args.manifest.as_deref(),
        args.out.as_deref(),
        args.checkpoint.as_deref(),
        args.input.as_deref(),
    );
    match &cli.command {
        Command::Encode(_) => commands::cmd_encode(&cfg, manifest, out),
        Command::Train(_) => commands::cmd_train(&cfg, manifest, out, tta),
        Command::Eval(_) => commands::cmd_eval(&cfg, manifest, ckpt, out, tta),
        Command::Predict(_) => commands::cmd_predict(&cfg, input, ckpt, tta),
        Command::Cost(_) => Ok(commands::cmd_cost(&cfg)),
        Command::InspectGraph(_) => commands::cmd_inspect_graph(&cfg, input),
    }
}
