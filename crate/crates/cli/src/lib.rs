//! Experiment driver for the RIS digital-twin simulator.
//!
//! `risdt <command> [flags]` where the command is one of `gen-data`,
//! `train`, `eval`, `sweep-power`, `compare` or `summary`. Every command
//! reads the same configuration and writes its artifacts under `--out`.

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use risdt_core::error::{ConfigError, EnvError, ModelError};
use serde::Serialize;
use thiserror::Error;

pub mod commands;
pub mod summary;

pub use commands::run;
pub use summary::emit_summary;

/// Default P_max grid of `sweep-power`, dBm.
pub const DEFAULT_PMAX_DBM: [f64; 3] = [37.0, 40.0, 43.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    Train,
    Eval,
    SweepPower,
    Compare,
    Summary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    PgZfo,
    DfWp,
    Rom,
    Random,
    Expert,
}

impl PolicyName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PgZfo => "pg-zfo",
            Self::DfWp => "df-wp",
            Self::Rom => "rom",
            Self::Random => "random",
            Self::Expert => "expert",
        }
    }

    /// Policies backed by a trained checkpoint.
    pub fn is_learned(self) -> bool {
        matches!(self, Self::PgZfo | Self::DfWp)
    }
}

impl std::fmt::Display for PolicyName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Parser)]
#[command(name = "risdt", version, about = "RIS-assisted digital-twin experiments")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON configuration (`system` and optional `scenes`). Omitted: desk profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "RISDT_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// Master seed.
    #[arg(long, env = "RISDT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Evaluation seeds per scene.
    #[arg(long, default_value_t = 50)]
    pub seeds: usize,
    /// Held-out scene ids; all other scenes are training scenes.
    /// Default: the last three scenes.
    #[arg(long, value_delimiter = ',')]
    pub scenes: Vec<u32>,
    #[arg(long = "pmax-dbm", value_delimiter = ',', allow_negative_numbers = true)]
    pub pmax_dbm: Vec<f64>,
    /// Policies to train or evaluate. Defaults depend on the command.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub policy: Vec<PolicyName>,
    /// Expert episodes per training scene.
    #[arg(long, default_value_t = 30)]
    pub episodes: usize,
    /// Expert candidates per slot.
    #[arg(long, default_value_t = 32)]
    pub candidates: usize,
    /// Training epochs; defaults to the desk training profile.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Held-out evaluations during training, after the untrained one.
    #[arg(long, default_value_t = 5)]
    pub checkpoints: usize,
    /// Seeds per scene for checkpoint evaluations.
    #[arg(long, default_value_t = 10)]
    pub checkpoint_seeds: usize,
    /// Scenes sampled when the configuration lists none.
    #[arg(long, default_value_t = 11)]
    pub num_scenes: usize,
    /// CSV inputs of `summary`; default: every CSV in `--out`.
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
}

/// Validated command-line request.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentPlan {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub seeds: usize,
    pub held_out: Vec<u32>,
    pub pmax_dbm: Vec<f64>,
    pub policies: Vec<PolicyName>,
    pub episodes: usize,
    pub candidates: usize,
    pub epochs: Option<usize>,
    pub checkpoints: usize,
    pub checkpoint_seeds: usize,
    pub num_scenes: usize,
    pub inputs: Vec<PathBuf>,
}

impl ExperimentPlan {
    pub fn from_cli(cli: Cli) -> Result<Self, CliError> {
        let usage = |m: &str| Err(CliError::Usage(m.into()));
        if cli.seeds == 0 {
            return usage("--seeds must be at least 1");
        }
        if cli.episodes < 2 {
            return usage("--episodes must be at least 2 so both pools are non-empty");
        }
        if cli.candidates == 0 {
            return usage("--candidates must be at least 1");
        }
        if cli.epochs == Some(0) {
            return usage("--epochs must be at least 1");
        }
        if cli.checkpoint_seeds == 0 {
            return usage("--checkpoint-seeds must be at least 1");
        }
        if cli.pmax_dbm.iter().any(|p| !p.is_finite()) {
            return usage("--pmax-dbm values must be finite");
        }
        let pmax_dbm = if cli.pmax_dbm.is_empty() {
            DEFAULT_PMAX_DBM.to_vec()
        } else {
            cli.pmax_dbm
        };
        let policies = if cli.policy.is_empty() {
            match cli.command {
                Command::Train => vec![PolicyName::PgZfo, PolicyName::DfWp],
                Command::Eval => vec![PolicyName::PgZfo],
                Command::Compare | Command::SweepPower => {
                    vec![PolicyName::PgZfo, PolicyName::DfWp, PolicyName::Rom]
                }
                Command::GenData | Command::Summary => vec![],
            }
        } else {
            cli.policy
        };
        if cli.command == Command::Train && policies.iter().any(|p| !p.is_learned()) {
            return usage("train accepts only pg-zfo and df-wp");
        }
        Ok(Self {
            command: cli.command,
            config: cli.config,
            out: cli.out,
            seed: cli.seed,
            seeds: cli.seeds,
            held_out: cli.scenes,
            pmax_dbm,
            policies,
            episodes: cli.episodes,
            candidates: cli.candidates,
            epochs: cli.epochs,
            checkpoints: cli.checkpoints,
            checkpoint_seeds: cli.checkpoint_seeds,
            num_scenes: cli.num_scenes,
            inputs: cli.inputs,
        })
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration and usage problems, 3 for pipeline failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Usage(_) => 2,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Usage(_) => "usage",
            Self::Model(_) => "model",
            Self::Env(_) => "environment",
            Self::Io { .. } => "io",
            Self::Malformed { .. } => "malformed-input",
            Self::Runtime(_) => "runtime",
        }
    }

    /// One-line JSON error record written to stderr on failure.
    pub fn record(&self, command: Option<Command>) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "exit_code": self.exit_code(),
                "command": command,
                "message": self.to_string(),
            }
        })
    }
}
