//! Experiment orchestration, metric post-processing and the finite-difference suite.

mod experiment;
pub mod gradcheck;
mod metrics;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
pub use metrics::{
    normalize_rewards, read_csv, reward_rows, summarize_delays, write_csv, DelaySummaryRow,
    MetricsSeries, RewardRow,
};

use thiserror::Error;

use crate::agent::AgentError;
use crate::netenv::EnvError;
use crate::nn::NnError;
use crate::replay::ReplayError;
use crate::stats::StatsError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("empty reward series")]
    EmptySeries,
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
