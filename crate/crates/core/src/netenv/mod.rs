//! Simulated SDN: topology, gravity-model traffic, weight-driven routing
//! and an analytic queueing delay model.

mod delay;
mod env;
mod routing;
mod topology;
mod traffic;

pub use delay::{compute_delay, compute_delay_with, mean_delay, DelayModel, DelayReport};
pub use env::{Env, EnvConfig, StateWindow, StepOutcome};
pub use routing::{decode_action, path_cost, Hop, RoutingSolution, WEIGHT_FLOOR};
pub use topology::{Link, Topology};
pub use traffic::{
    generate_gravity, generate_traffic, pack_state, read_traffic_csv, unpack_state,
    write_traffic_csv, GravityConfig, TrafficMatrix,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid traffic: {0}")]
    Traffic(String),
    #[error("invalid action: {0}")]
    Action(String),
    #[error("routing: {0}")]
    Routing(String),
    #[error("episode: {0}")]
    Episode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;
