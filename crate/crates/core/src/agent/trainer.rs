use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::pair::{clamp_action, ActorCriticPair};
use super::{AgentConfig, NoiseKind, Result};
use crate::netenv::{mean_delay, DelayModel, Env, EnvConfig, GravityConfig, Topology};
use crate::replay::{PerBuffer, Transition};
use crate::rng::{derive_seed, seeded};
use crate::stats::{summarize, Summary};

const STREAM_NOISE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_SAMPLE: u64 = 4;
const STREAM_REFERENCE: u64 = 5;
const STREAM_EPOCH: u64 = 1 << 20;

/// One row of the training metrics file. Delays are raw milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_delay_ms: f64,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
    pub noise_scale: f64,
    #[serde(skip)]
    pub rewards: Vec<f64>,
}

/// Owns everything a training run mutates; advances one epoch at a time.
pub struct Trainer {
    config: AgentConfig,
    topology: Arc<Topology>,
    env_config: EnvConfig,
    pair: ActorCriticPair,
    buffer: PerBuffer,
    epoch: usize,
    sigma: f64,
    decay: f64,
    ou_state: Vec<f64>,
    reward_scale: f64,
    noise_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
}

/// Mean delay of uniform link weights (fewest hops) over the first steps of
/// a reference sequence.
fn reference_delay(topology: &Arc<Topology>, env_config: &EnvConfig, seed: u64) -> Result<f64> {
    let probe = EnvConfig {
        episode_len: env_config.episode_len.min(32),
        ..env_config.clone()
    };
    let mut env = Env::new(topology.clone(), &probe, seed)?;
    let uniform = vec![0.5; topology.link_count()];
    let mut total = 0.0;
    while !env.is_done() {
        total += env.step(&uniform)?.delay_ms;
    }
    Ok(total / probe.episode_len as f64)
}

impl Trainer {
    pub fn new(
        topology: Arc<Topology>,
        gravity: GravityConfig,
        config: AgentConfig,
    ) -> Result<Self> {
        Self::with_delay_model(topology, gravity, DelayModel::default(), config)
    }

    pub fn with_delay_model(
        topology: Arc<Topology>,
        gravity: GravityConfig,
        delay: DelayModel,
        config: AgentConfig,
    ) -> Result<Self> {
        config.validate()?;
        let env_config = EnvConfig {
            gravity,
            episode_len: config.episode_len,
            window: config.window,
            delay,
        };
        let pair = ActorCriticPair::for_topology(&topology, &config)?;
        let buffer = PerBuffer::new(config.per.clone())?;
        let reward_scale = match config.reward_scale {
            Some(s) => s,
            None => reference_delay(
                &topology,
                &env_config,
                derive_seed(config.seed, STREAM_REFERENCE),
            )?,
        };
        let n = &config.noise;
        let total_steps = (config.epochs * config.episode_len).max(1);
        let decay = n.decay.unwrap_or_else(|| {
            if n.sigma0 > 0.0 && n.sigma_min > 0.0 && n.sigma_min < n.sigma0 {
                (n.sigma_min / n.sigma0).powf(1.0 / total_steps as f64)
            } else {
                1.0
            }
        });
        Ok(Self {
            sigma: n.sigma0,
            decay,
            ou_state: vec![0.0; topology.link_count()],
            reward_scale,
            noise_rng: seeded(derive_seed(config.seed, STREAM_NOISE)),
            dropout_rng: seeded(derive_seed(config.seed, STREAM_DROPOUT)),
            sample_rng: seeded(derive_seed(config.seed, STREAM_SAMPLE)),
            config,
            topology,
            env_config,
            pair,
            buffer,
            epoch: 0,
        })
    }

    pub fn pair(&self) -> &ActorCriticPair {
        &self.pair
    }

    pub fn into_pair(self) -> ActorCriticPair {
        self.pair
    }

    pub fn buffer(&self) -> &PerBuffer {
        &self.buffer
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn reward_scale(&self) -> f64 {
        self.reward_scale
    }

    pub fn noise_scale(&self) -> f64 {
        self.sigma
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    fn explore(&mut self, window: &crate::netenv::StateWindow) -> Result<Vec<f64>> {
        let mut a = self.pair.policy(window)?;
        match self.config.noise.kind {
            NoiseKind::Gaussian => {
                for v in &mut a {
                    *v += self.sigma * self.noise_rng.sample::<f64, _>(StandardNormal);
                }
            }
            NoiseKind::OrnsteinUhlenbeck => {
                let theta = self.config.noise.ou_theta;
                for (v, x) in a.iter_mut().zip(&mut self.ou_state) {
                    *x +=
                        -theta * *x + self.sigma * self.noise_rng.sample::<f64, _>(StandardNormal);
                    *v += *x;
                }
            }
        }
        clamp_action(&mut a);
        self.sigma = (self.sigma * self.decay)
            .max(self.config.noise.sigma_min.min(self.config.noise.sigma0));
        Ok(a)
    }

    /// Runs one episode of `T` steps on a fresh traffic sequence, training
    /// after every step once the buffer holds a full batch.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let seed = derive_seed(self.config.seed, STREAM_EPOCH + self.epoch as u64);
        let mut env = Env::new(self.topology.clone(), &self.env_config, seed)?;
        self.ou_state.iter_mut().for_each(|x| *x = 0.0);
        let mut state = env.reset();
        let mut delays = Vec::with_capacity(self.config.episode_len);
        let mut rewards = Vec::with_capacity(self.config.episode_len);
        let (mut losses, mut objectives) = (Vec::new(), Vec::new());
        while !env.is_done() {
            let action = self.explore(&state)?;
            let out = env.step(&action)?;
            let reward = self.config.reward_offset - out.delay_ms / self.reward_scale;
            delays.push(out.delay_ms);
            rewards.push(reward);
            self.buffer.push(Transition {
                state,
                action,
                reward,
                next: out.next.clone(),
                done: out.done,
            });
            if self.buffer.len() >= self.config.batch {
                let rep = self.pair.train_step(
                    &mut self.buffer,
                    &self.config,
                    &mut self.sample_rng,
                    &mut self.dropout_rng,
                )?;
                losses.push(rep.critic_loss);
                objectives.push(rep.actor_objective);
            }
            state = out.next;
        }
        self.epoch += 1;
        let s = summarize(&delays)?;
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        log::debug!(
            "epoch {} mean delay {:.3} ms, noise {:.4}",
            self.epoch,
            s.mean,
            self.sigma
        );
        Ok(EpochMetrics {
            epoch: self.epoch,
            mean_delay_ms: s.mean,
            min: s.min,
            max: s.max,
            q1: s.q1,
            median: s.median,
            q3: s.q3,
            critic_loss: mean(&losses),
            actor_objective: mean(&objectives),
            noise_scale: self.sigma,
            rewards,
        })
    }
}

/// Trains for `config.epochs` epochs.
pub fn train(
    topology: Arc<Topology>,
    gravity: GravityConfig,
    config: AgentConfig,
) -> Result<(ActorCriticPair, Vec<EpochMetrics>)> {
    let epochs = config.epochs;
    let mut trainer = Trainer::new(topology, gravity, config)?;
    let metrics = (0..epochs)
        .map(|_| trainer.run_epoch())
        .collect::<Result<Vec<_>>>()?;
    Ok((trainer.into_pair(), metrics))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean over steps of the per-step mean delay, one value per sequence.
    pub per_sequence: Vec<f64>,
    pub summary: Summary,
}

/// `count` held-out episodes with seeds derived from `seed`.
pub fn evaluation_envs(
    topology: &Arc<Topology>,
    env_config: &EnvConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Env>> {
    (0..count)
        .map(|k| {
            Ok(Env::new(
                topology.clone(),
                env_config,
                derive_seed(seed, k as u64),
            )?)
        })
        .collect()
}

/// Noise-free rollouts of the online actor.
pub fn evaluate(pair: &ActorCriticPair, envs: impl IntoIterator<Item = Env>) -> Result<EvalReport> {
    let mut per_sequence = Vec::new();
    for mut env in envs {
        let mut state = env.reset();
        let mut total = 0.0;
        while !env.is_done() {
            let mut action = pair.policy(&state)?;
            clamp_action(&mut action);
            let out = env.step(&action)?;
            total += mean_delay(&out.report);
            state = out.next;
        }
        per_sequence.push(total / env.episode_len() as f64);
    }
    let summary = summarize(&per_sequence)?;
    Ok(EvalReport {
        per_sequence,
        summary,
    })
}
