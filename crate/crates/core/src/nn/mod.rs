//! Layers and the actor/critic builders.

mod backbone;
mod layers;
mod params;

pub use backbone::{
    render_table, Actor, BackboneKind, Critic, LayerSummary, NetConfig, Network, Pass,
};
pub use layers::{
    Activation, Attention, BatchNorm, Conv2d, Dense, Dropout, Forward, Lstm, MaxPool2d, Mode,
};
pub use params::{Binding, Param, ParamId, ParamSet, RunningUpdate};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown backbone kind {0:?} (expected cnn-lstm-tam, ffnn, cnn-only or lstm-only)")]
    UnknownBackbone(String),
    #[error("incompatible parameters: {0}")]
    Mismatch(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
