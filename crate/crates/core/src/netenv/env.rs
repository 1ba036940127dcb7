use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::delay::{compute_delay_with, mean_delay, DelayModel, DelayReport};
use super::routing::decode_action;
use super::topology::Topology;
use super::traffic::{generate_gravity, pack_state, GravityConfig, TrafficMatrix};
use super::{EnvError, Result};
use crate::tensor::Tensor;

/// `W` consecutive packed frames, oldest first. Frames are shared, so
/// cloning a window is cheap.
#[derive(Clone, Debug, PartialEq)]
pub struct StateWindow {
    frames: Vec<Arc<Tensor>>,
}

impl StateWindow {
    pub fn new(frames: Vec<Arc<Tensor>>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| EnvError::Episode("a window needs at least one frame".into()))?;
        if frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(EnvError::Episode("window frames differ in shape".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Arc<Tensor>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Stacks the frames as `[W, H, W']`.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = vec![self.frames.len()];
        shape.extend_from_slice(self.frames[0].shape());
        let data = self
            .frames
            .iter()
            .flat_map(|f| f.data().iter().copied())
            .collect();
        Tensor::new(shape, data).expect("frames share one shape")
    }

    /// Stacks several windows into one `[B, W, H, W']` batch.
    pub fn batch<'a>(windows: impl IntoIterator<Item = &'a StateWindow>) -> Tensor {
        let mut shape = Vec::new();
        let mut data = Vec::new();
        let mut count = 0;
        for w in windows {
            if count == 0 {
                shape.push(w.frames.len());
                shape.extend_from_slice(w.frames[0].shape());
            }
            data.extend(w.frames.iter().flat_map(|f| f.data().iter().copied()));
            count += 1;
        }
        shape.insert(0, count);
        Tensor::new(shape, data).expect("windows share one shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub gravity: GravityConfig,
    /// Steps per episode (T).
    pub episode_len: usize,
    pub window: usize,
    #[serde(default)]
    pub delay: DelayModel,
}

impl EnvConfig {
    pub fn new(ilt: f64, episode_len: usize, window: usize) -> Self {
        Self {
            gravity: GravityConfig::new(ilt),
            episode_len,
            window,
            delay: DelayModel::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub next: StateWindow,
    /// Mean end-to-end delay in ms on the matrix the action was applied to.
    pub delay_ms: f64,
    pub done: bool,
    pub report: DelayReport,
}

/// Replays one traffic sequence of `T + W` matrices. The window at step `t`
/// holds matrices `t..t+W`; the action is scored on the newest of them.
#[derive(Clone, Debug)]
pub struct Env {
    topology: Arc<Topology>,
    delay: DelayModel,
    window: usize,
    episode_len: usize,
    frames: Vec<Arc<Tensor>>,
    traffic: Vec<TrafficMatrix>,
    t: usize,
}

impl Env {
    pub fn new(topology: Arc<Topology>, config: &EnvConfig, seed: u64) -> Result<Self> {
        let traffic = generate_gravity(
            &topology,
            &config.gravity,
            config.episode_len + config.window,
            seed,
        )?;
        Self::from_traffic(topology, traffic, config.window, config.delay.clone())
    }

    /// Episode over an explicit sequence; its length must be at least `W + 1`.
    pub fn from_traffic(
        topology: Arc<Topology>,
        traffic: Vec<TrafficMatrix>,
        window: usize,
        delay: DelayModel,
    ) -> Result<Self> {
        if window == 0 {
            return Err(EnvError::Episode(
                "window must hold at least one frame".into(),
            ));
        }
        if traffic.len() <= window {
            return Err(EnvError::Episode(format!(
                "{} matrices cannot fill a window of {window} and take a step",
                traffic.len()
            )));
        }
        let n = topology.node_count();
        if let Some(tm) = traffic.iter().find(|tm| tm.size() != n) {
            return Err(EnvError::Traffic(format!(
                "{}-node matrix on a {n}-node topology",
                tm.size()
            )));
        }
        let frames = traffic.iter().map(|tm| Arc::new(pack_state(tm))).collect();
        Ok(Self {
            topology,
            delay,
            window,
            episode_len: traffic.len() - window,
            frames,
            traffic,
            t: 0,
        })
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn episode_len(&self) -> usize {
        self.episode_len
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.episode_len
    }

    pub fn reset(&mut self) -> StateWindow {
        self.t = 0;
        self.window()
    }

    pub fn window(&self) -> StateWindow {
        StateWindow {
            frames: self.frames[self.t..self.t + self.window].to_vec(),
        }
    }

    pub fn current_matrix(&self) -> &TrafficMatrix {
        &self.traffic[self.t + self.window - 1]
    }

    /// Scores `action` on the current matrix without advancing.
    pub fn evaluate_action(&self, action: &[f64]) -> Result<DelayReport> {
        let routing = decode_action(action, &self.topology)?;
        compute_delay_with(&self.delay, &routing, self.current_matrix(), &self.topology)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(EnvError::Episode(format!(
                "episode finished after {} steps",
                self.episode_len
            )));
        }
        let report = self.evaluate_action(action)?;
        self.t += 1;
        Ok(StepOutcome {
            next: StateWindow {
                frames: self.frames[self.t..self.t + self.window].to_vec(),
            },
            delay_ms: mean_delay(&report),
            done: self.is_done(),
            report,
        })
    }
}
