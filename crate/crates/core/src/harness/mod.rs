//! The outer system: run configuration, replay buffer, real-environment
//! collection and evaluation, and the Dyna training loop with its metrics
//! and checkpoints.

mod buffer;
mod config;
mod eval;
mod run;

pub use buffer::ReplayBuffer;
pub use config::{RunConfig, KEYS};
pub use eval::{evaluate_policy, Collector, EvalStats};
pub use run::{
    evaluate_checkpoint, load_run, run_agd_mbrl, sample_from_checkpoint, LoadedRun, MetricsRow, RunSummary,
    METRICS_HEADER,
};

use crate::agent::AgentError;
use crate::envs::EnvError;
use crate::numerics::NumericsError;
use crate::worldmodel::WorldModelError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    WorldModel(#[from] WorldModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
