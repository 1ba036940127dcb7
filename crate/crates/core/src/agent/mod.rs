//! DDPG-style training of the actor/critic pair against the SDN environment.

mod pair;
mod trainer;

pub use pair::{clamp_action, ActorCriticPair, StepReport, ACTION_MARGIN};
pub use trainer::{evaluate, evaluation_envs, train, EpochMetrics, EvalReport, Trainer};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netenv::EnvError;
use crate::nn::{BackboneKind, NnError};
use crate::replay::{PerConfig, ReplayError};
use crate::stats::StatsError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum AgentError {
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
    #[error("invalid agent config: {0}")]
    Config(String),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Gaussian,
    OrnsteinUhlenbeck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub sigma0: f64,
    pub sigma_min: f64,
    /// Per-step multiplicative decay. `None` picks the rate that reaches
    /// `sigma_min` at the end of the configured epochs.
    pub decay: Option<f64>,
    pub ou_theta: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma0: 0.2,
            sigma_min: 0.01,
            decay: None,
            ou_theta: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch: usize,
    pub per: PerConfig,
    pub episode_len: usize,
    pub epochs: usize,
    pub window: usize,
    pub noise: NoiseConfig,
    pub backbone: BackboneKind,
    pub trainable_attention: bool,
    /// Global gradient-norm ceiling for both networks; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Delay in ms that maps to reward -1. `None` uses the fewest-hop
    /// policy's delay on a reference sequence.
    pub reward_scale: Option<f64>,
    /// Added to every reward, so the reference policy scores about
    /// `reward_offset - 1` and the critic does not have to spend its early
    /// updates fitting a large constant.
    pub reward_offset: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.001,
            actor_lr: 1e-3,
            critic_lr: 1e-4,
            batch: 32,
            per: PerConfig::default(),
            episode_len: 1000,
            epochs: 60,
            window: 4,
            noise: NoiseConfig::default(),
            backbone: BackboneKind::CnnLstmTam,
            trainable_attention: false,
            grad_clip: Some(10.0),
            reward_scale: None,
            reward_offset: 1.0,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AgentError::Config(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0,1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0,1], got {}", self.tau));
        }
        for (name, lr) in [("actor", self.actor_lr), ("critic", self.critic_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!(
                    "{name} learning rate must be a nonnegative number, got {lr}"
                ));
            }
        }
        if self.batch == 0 || self.window == 0 || self.episode_len == 0 {
            return bad("batch, window and episode length must be positive".into());
        }
        let n = &self.noise;
        if !(n.sigma0 >= 0.0 && n.sigma_min >= 0.0 && n.sigma_min <= n.sigma0.max(n.sigma_min)) {
            return bad(format!(
                "noise scales must be nonnegative, got {} / {}",
                n.sigma0, n.sigma_min
            ));
        }
        if let Some(d) = n.decay {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("noise decay must lie in (0,1], got {d}"));
            }
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("gradient clip must be positive, got {c}"));
            }
        }
        if let Some(s) = self.reward_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("reward scale must be positive, got {s}"));
            }
        }
        if !self.reward_offset.is_finite() {
            return bad(format!(
                "reward offset must be finite, got {}",
                self.reward_offset
            ));
        }
        self.per.validate()?;
        Ok(())
    }
}
