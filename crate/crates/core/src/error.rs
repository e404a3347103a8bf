use thiserror::Error;

use crate::config::Violation;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error in {keys:?}: {message}")]
    Schema { keys: Vec<String>, message: String },
    #[error("invalid configuration: {}", join(.0))]
    Invalid(Vec<Violation>),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("non-positive distance {0} m (co-located nodes)")]
    ZeroDistance(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeamformingError {
    #[error("channel matrix is rank deficient (Gram condition number {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("minimum-power floors need {required:.6e} W but only {available:.6e} W is available")]
    InfeasibleFloors { required: f64, available: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid water-filling input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QoeError {
    #[error("resolution {resolution} is below the minimum {min}")]
    ResolutionBelowMin { resolution: f64, min: f64 },
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid scene: {}", join(.0))]
    InvalidScene(Vec<Violation>),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Beamforming(#[from] BeamformingError),
    #[error("raw action has length {got}, expected {expected}")]
    ActionLength { expected: usize, got: usize },
    #[error("raw action contains a non-finite entry at index {0}")]
    NonFiniteAction(usize),
    #[error("episode already finished at slot {0}")]
    Finished(usize),
    #[error("policy failed: {0}")]
    Policy(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { loss: f64, step: u64 },
    #[error("empty sample pool for scene {0}")]
    EmptyPool(u32),
    #[error("no prompt source for scene {0}")]
    MissingPrompt(u32),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Checkpoint(e.to_string())
    }
}
