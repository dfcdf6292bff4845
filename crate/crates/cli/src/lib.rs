//! The `dmdp` command line: config loading, overrides and the pipelines.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;

/// Environment variable that replaces `train.seed`.
pub const SEED_ENV: &str = "DMDP_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "dmdp",
    version,
    about = "Gated, modality-disentangled deep prompt tuning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config value by dotted path, e.g. `train.lr=0.01`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic manifest, its pretraining pairs and the vocabulary.
    Gen,
    /// Contrastively pretrain the backbone into `backbone.ckpt`.
    Pretrain,
    /// Sample a few-shot split into `split/`.
    Split,
    /// Tune a prompt bank into `bank.ckpt` and `history.json`.
    Train,
    /// Score `bank.ckpt` into `metrics.json`.
    Eval,
    /// Train all six variants into `ablation.json`.
    Ablate,
    /// Depth and length sweeps into `sweep_depth.csv` and `sweep_length.csv`.
    Sweep,
    /// Export prompt attention maps into `attn/`.
    Attn,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Pretrain => "pretrain",
            Command::Split => "split",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
            Command::Attn => "attn",
        }
    }
}

/// Loads the config, applies overrides and the seed variable, and validates.
pub fn resolve(cli: &Cli, seed_env: Option<String>) -> Result<ExperimentConfig, CliError> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.sets)?.resolved();
    if let Some(raw) = seed_env {
        cfg.train.seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("{SEED_ENV} must be an unsigned integer, got `{raw}`")))?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli, seed_env: Option<String>) -> Result<(), CliError> {
    let cfg = resolve(cli, seed_env)?;
    cfg.validate()?;
    if cli.dry_run {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    match cli.command {
        Command::Gen => commands::gen(&cfg, &out),
        Command::Pretrain => commands::pretrain(&cfg, &out),
        Command::Split => commands::split(&cfg, &out),
        Command::Train => commands::train_cmd(&cfg, &out),
        Command::Eval => commands::eval(&cfg, &out),
        Command::Ablate => commands::ablate(&cfg, &out),
        Command::Sweep => commands::sweep_cmd(&cfg, &out),
        Command::Attn => commands::attn(&cfg, &out),
    }
}

/// Parses `args` (without the program name) and runs them in-process.
pub fn run_args<I, S>(args: I, seed_env: Option<String>) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("dmdp")).chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    run(&cli, seed_env)
}
