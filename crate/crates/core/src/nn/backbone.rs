//! Actor and critic networks assembled from the layers in [`super::layers`].
//!
//! The CNN-LSTM-TAM state branch encodes each frame of the state window with
//! conv -> batch norm -> max pool -> dropout, averages the pooled map to one
//! 64-vector per frame, runs the LSTM across the window and keeps the last
//! row of the attention context. The critic's action branch applies the same
//! block to the action vector laid out as a `1 x L` image and treats the
//! pooled positions as its sequence.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::layers::{
    Activation, Attention, BatchNorm, Conv2d, Dense, Dropout, Forward, Lstm, MaxPool2d,
};
use super::params::{Binding, ParamSet};
use super::{NnError, Result};
use crate::tensor::{Checkpoint, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    CnnLstmTam,
    Ffnn,
    CnnOnly,
    LstmOnly,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 4] =
        [Self::CnnLstmTam, Self::Ffnn, Self::CnnOnly, Self::LstmOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::CnnLstmTam => "cnn-lstm-tam",
            Self::Ffnn => "ffnn",
            Self::CnnOnly => "cnn-only",
            Self::LstmOnly => "lstm-only",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NnError::UnknownBackbone(s.to_owned()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub kind: BackboneKind,
    /// Packed traffic-matrix frame, `(N-1, N)`.
    pub state_shape: (usize, usize),
    pub window: usize,
    pub action_dim: usize,
    pub filters: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub trainable_attention: bool,
}

impl NetConfig {
    pub fn new(
        kind: BackboneKind,
        state_shape: (usize, usize),
        window: usize,
        action_dim: usize,
    ) -> Self {
        Self {
            kind,
            state_shape,
            window,
            action_dim,
            filters: 64,
            hidden: 64,
            dropout: 0.5,
            trainable_attention: false,
        }
    }

    /// GEANT2-sized network: 23x24 frames and 37 link weights.
    pub fn geant2(kind: BackboneKind, window: usize) -> Self {
        Self::new(kind, (23, 24), window, 37)
    }
}

/// One row of [`Actor::describe`] / [`Critic::describe`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSummary {
    pub branch: &'static str,
    pub name: &'static str,
    pub out_shape: String,
    pub params: usize,
}

fn shape_str(dims: &[usize]) -> String {
    let inner: Vec<String> = dims.iter().map(usize::to_string).collect();
    format!("(None,{})", inner.join(","))
}

/// Renders summaries as an aligned text table.
pub fn render_table(rows: &[LayerSummary]) -> String {
    let mut out = format!(
        "{:<8} {:<22} {:<18} {:>8}\n",
        "branch", "layer", "out shape", "params"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:<22} {:<18} {:>8}\n",
            r.branch, r.name, r.out_shape, r.params
        ));
    }
    let total: usize = rows.iter().map(|r| r.params).sum();
    out.push_str(&format!(
        "{:<8} {:<22} {:<18} {:>8}\n",
        "", "total", "", total
    ));
    out
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
    pool: MaxPool2d,
    dropout: Dropout,
    conv_hw: (usize, usize),
    pooled_hw: (usize, usize),
}

impl ConvBlock {
    fn new(
        params: &mut ParamSet,
        name: &str,
        input_hw: (usize, usize),
        kernel: (usize, usize),
        cfg: &NetConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let conv = Conv2d::new(params, &format!("{name}.conv"), 1, cfg.filters, kernel, rng);
        let conv_hw = conv.output_hw(input_hw.0, input_hw.1)?;
        let bn = BatchNorm::new(params, &format!("{name}.bn"), cfg.filters);
        // 2x2 windows with stride 2, narrowed along any axis shorter than 2
        let window = (conv_hw.0.min(2), conv_hw.1.min(2));
        let pool = MaxPool2d {
            pool: window,
            stride: window,
        };
        let pooled_hw = pool.output_hw(conv_hw.0, conv_hw.1)?;
        Ok(Self {
            conv,
            bn,
            pool,
            dropout: Dropout::new(cfg.dropout)?,
            conv_hw,
            pooled_hw,
        })
    }

    /// `[N,1,H,W] -> [N,F,h,w]`.
    fn forward(&self, f: &mut Forward, b: &Binding, params: &ParamSet, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, b, x)?;
        let y = self.bn.forward(f, b, params, y)?;
        let y = self.pool.forward(f, y)?;
        self.dropout.forward(f, y)
    }

    fn describe(&self, branch: &'static str, filters: usize, rows: &mut Vec<LayerSummary>) {
        let (ch, cw) = self.conv_hw;
        let (ph, pw) = self.pooled_hw;
        rows.push(LayerSummary {
            branch,
            name: "convolution",
            out_shape: shape_str(&[ch, cw, filters]),
            params: self.conv.param_count(),
        });
        rows.push(LayerSummary {
            branch,
            name: "batch normalization",
            out_shape: shape_str(&[ch, cw, filters]),
            params: self.bn.param_count(),
        });
        rows.push(LayerSummary {
            branch,
            name: "max pooling",
            out_shape: shape_str(&[ph, pw, filters]),
            params: 0,
        });
        rows.push(LayerSummary {
            branch,
            name: "dropout",
            out_shape: shape_str(&[ph * pw, filters]),
            params: 0,
        });
    }
}

#[derive(Clone, Debug)]
enum StateEncoder {
    SpatioTemporal {
        block: ConvBlock,
        lstm: Lstm,
        attention: Attention,
    },
    Ffnn(Dense),
    CnnOnly(ConvBlock),
    LstmOnly(Lstm),
}

fn make_attention(
    params: &mut ParamSet,
    name: &str,
    cfg: &NetConfig,
    rng: &mut dyn RngCore,
) -> Attention {
    if cfg.trainable_attention {
        Attention::trainable(params, name, cfg.hidden, cfg.hidden, cfg.hidden, rng)
    } else {
        Attention::identity(cfg.hidden)
    }
}

impl StateEncoder {
    fn new(params: &mut ParamSet, cfg: &NetConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let (h, w) = cfg.state_shape;
        Ok(match cfg.kind {
            BackboneKind::CnnLstmTam => {
                let block = ConvBlock::new(params, "state", (h, w), (2, 2), cfg, rng)?;
                let lstm = Lstm::new(params, "state.lstm", cfg.filters, cfg.hidden, rng);
                let attention = make_attention(params, "state.attention", cfg, rng);
                Self::SpatioTemporal {
                    block,
                    lstm,
                    attention,
                }
            }
            BackboneKind::Ffnn => Self::Ffnn(Dense::new(
                params,
                "state.dense",
                h * w,
                cfg.hidden,
                Activation::Relu,
                rng,
            )),
            BackboneKind::CnnOnly => {
                Self::CnnOnly(ConvBlock::new(params, "state", (h, w), (2, 2), cfg, rng)?)
            }
            BackboneKind::LstmOnly => {
                Self::LstmOnly(Lstm::new(params, "state.lstm", h * w, cfg.hidden, rng))
            }
        })
    }

    /// `[B,T,H,W] -> [B,hidden]`.
    fn forward(
        &self,
        f: &mut Forward,
        b: &Binding,
        params: &ParamSet,
        cfg: &NetConfig,
        states: Var,
    ) -> Result<Var> {
        let shape = f.tape.value(states).shape().to_vec();
        let (h, w) = cfg.state_shape;
        if shape.len() != 4 || shape[1] != cfg.window || shape[2] != h || shape[3] != w {
            return Err(NnError::Shape(format!(
                "state batch must be [B,{},{h},{w}], got {shape:?}",
                cfg.window
            )));
        }
        let (batch, steps) = (shape[0], shape[1]);
        let last_frame = |f: &mut Forward| -> Result<Var> {
            let x = f.tape.slice(states, 1, steps - 1, steps)?;
            Ok(x)
        };
        match self {
            Self::SpatioTemporal {
                block,
                lstm,
                attention,
            } => {
                let x = f.tape.reshape(states, &[batch * steps, 1, h, w])?;
                let y = block.forward(f, b, params, x)?;
                let y = f.tape.spatial_mean(y)?;
                let seq = f.tape.reshape(y, &[batch, steps, cfg.filters])?;
                let hs = lstm.forward(f, b, seq)?;
                attention.forward(f, b, hs)
            }
            Self::Ffnn(dense) => {
                let x = last_frame(f)?;
                let x = f.tape.reshape(x, &[batch, h * w])?;
                dense.forward(f, b, x)
            }
            Self::CnnOnly(block) => {
                let x = last_frame(f)?;
                let y = block.forward(f, b, params, x)?;
                Ok(f.tape.spatial_mean(y)?)
            }
            Self::LstmOnly(lstm) => {
                let seq = f.tape.reshape(states, &[batch, steps, h * w])?;
                let hs = lstm.forward(f, b, seq)?;
                let last = f.tape.slice(hs, 1, steps - 1, steps)?;
                Ok(f.tape.reshape(last, &[batch, cfg.hidden])?)
            }
        }
    }

    fn describe(&self, cfg: &NetConfig, rows: &mut Vec<LayerSummary>) {
        let (h, w) = cfg.state_shape;
        rows.push(LayerSummary {
            branch: "state",
            name: "input",
            out_shape: shape_str(&[h, w]),
            params: 0,
        });
        match self {
            Self::SpatioTemporal {
                block,
                lstm,
                attention,
            } => {
                block.describe("state", cfg.filters, rows);
                rows.push(LayerSummary {
                    branch: "state",
                    name: "spatial mean",
                    out_shape: shape_str(&[cfg.window, cfg.filters]),
                    params: 0,
                });
                rows.push(LayerSummary {
                    branch: "state",
                    name: "lstm",
                    out_shape: shape_str(&[cfg.window, cfg.hidden]),
                    params: lstm.param_count(),
                });
                rows.push(LayerSummary {
                    branch: "state",
                    name: "soft attention",
                    out_shape: shape_str(&[cfg.hidden]),
                    params: attention.param_count(),
                });
            }
            Self::Ffnn(d) => rows.push(LayerSummary {
                branch: "state",
                name: "dense",
                out_shape: shape_str(&[cfg.hidden]),
                params: d.param_count(),
            }),
            Self::CnnOnly(block) => {
                block.describe("state", cfg.filters, rows);
                rows.push(LayerSummary {
                    branch: "state",
                    name: "spatial mean",
                    out_shape: shape_str(&[cfg.filters]),
                    params: 0,
                });
            }
            Self::LstmOnly(l) => rows.push(LayerSummary {
                branch: "state",
                name: "lstm",
                out_shape: shape_str(&[cfg.hidden]),
                params: l.param_count(),
            }),
        }
    }
}

// one per critic, so the size gap costs nothing
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum ActionEncoder {
    Sequence {
        block: ConvBlock,
        lstm: Lstm,
        attention: Attention,
    },
    Dense(Dense),
}

impl ActionEncoder {
    fn new(params: &mut ParamSet, cfg: &NetConfig, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(match cfg.kind {
            BackboneKind::CnnLstmTam => {
                let block =
                    ConvBlock::new(params, "action", (1, cfg.action_dim), (1, 2), cfg, rng)?;
                let lstm = Lstm::new(params, "action.lstm", cfg.filters, cfg.hidden, rng);
                let attention = make_attention(params, "action.attention", cfg, rng);
                Self::Sequence {
                    block,
                    lstm,
                    attention,
                }
            }
            _ => Self::Dense(Dense::new(
                params,
                "action.dense",
                cfg.action_dim,
                cfg.hidden,
                Activation::Relu,
                rng,
            )),
        })
    }

    /// `[B,L] -> [B,hidden]`.
    fn forward(
        &self,
        f: &mut Forward,
        b: &Binding,
        params: &ParamSet,
        cfg: &NetConfig,
        actions: Var,
    ) -> Result<Var> {
        let shape = f.tape.value(actions).shape().to_vec();
        if shape.len() != 2 || shape[1] != cfg.action_dim {
            return Err(NnError::Shape(format!(
                "action batch must be [B,{}], got {shape:?}",
                cfg.action_dim
            )));
        }
        let batch = shape[0];
        match self {
            Self::Sequence {
                block,
                lstm,
                attention,
            } => {
                let x = f.tape.reshape(actions, &[batch, 1, 1, cfg.action_dim])?;
                let y = block.forward(f, b, params, x)?;
                let (ph, pw) = block.pooled_hw;
                let y = f.tape.reshape(y, &[batch, cfg.filters, ph * pw])?;
                let seq = f.tape.transpose(y)?;
                let hs = lstm.forward(f, b, seq)?;
                attention.forward(f, b, hs)
            }
            Self::Dense(d) => d.forward(f, b, actions),
        }
    }

    fn describe(&self, cfg: &NetConfig, rows: &mut Vec<LayerSummary>) {
        rows.push(LayerSummary {
            branch: "action",
            name: "input",
            out_shape: shape_str(&[1, cfg.action_dim]),
            params: 0,
        });
        match self {
            Self::Sequence {
                block,
                lstm,
                attention,
            } => {
                block.describe("action", cfg.filters, rows);
                let (ph, pw) = block.pooled_hw;
                rows.push(LayerSummary {
                    branch: "action",
                    name: "lstm",
                    out_shape: shape_str(&[ph * pw, cfg.hidden]),
                    params: lstm.param_count(),
                });
                rows.push(LayerSummary {
                    branch: "action",
                    name: "soft attention",
                    out_shape: shape_str(&[cfg.hidden]),
                    params: attention.param_count(),
                });
            }
            Self::Dense(d) => rows.push(LayerSummary {
                branch: "action",
                name: "dense",
                out_shape: shape_str(&[cfg.hidden]),
                params: d.param_count(),
            }),
        }
    }
}

/// Output of a forward pass: the result plus the parameter handles needed to
/// read gradients back.
pub struct Pass {
    pub output: Var,
    pub binding: Binding,
}

/// Deterministic policy network: state window to per-link weights in (0,1).
#[derive(Clone, Debug)]
pub struct Actor {
    config: NetConfig,
    params: ParamSet,
    encoder: StateEncoder,
    hidden: Dense,
    head: Dense,
}

impl Actor {
    pub fn new(config: NetConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let mut params = ParamSet::new();
        let encoder = StateEncoder::new(&mut params, &config, rng)?;
        let hidden = Dense::new(
            &mut params,
            "dense",
            config.hidden,
            config.hidden,
            Activation::Relu,
            rng,
        );
        let head = Dense::new_small(
            &mut params,
            "output",
            config.hidden,
            config.action_dim,
            Activation::Sigmoid,
            3e-3,
            rng,
        );
        Ok(Self {
            config,
            params,
            encoder,
            hidden,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `states` is `[B,window,H,W]`; output `[B,action_dim]`.
    pub fn forward(&self, f: &mut Forward, states: Var) -> Result<Pass> {
        let binding = self.params.bind(f.tape);
        self.run(f, states, binding)
    }

    /// Forward pass with the parameters held constant.
    pub fn forward_frozen(&self, f: &mut Forward, states: Var) -> Result<Pass> {
        let binding = self.params.bind_frozen(f.tape);
        self.run(f, states, binding)
    }

    fn run(&self, f: &mut Forward, states: Var, binding: Binding) -> Result<Pass> {
        let z = self
            .encoder
            .forward(f, &binding, &self.params, &self.config, states)?;
        let z = self.hidden.forward(f, &binding, z)?;
        let output = self.head.forward(f, &binding, z)?;
        Ok(Pass { output, binding })
    }

    pub fn describe(&self) -> Vec<LayerSummary> {
        let mut rows = Vec::new();
        self.encoder.describe(&self.config, &mut rows);
        rows.push(LayerSummary {
            branch: "state",
            name: "fully connected",
            out_shape: shape_str(&[self.config.hidden]),
            params: self.hidden.param_count(),
        });
        rows.push(LayerSummary {
            branch: "state",
            name: "output",
            out_shape: shape_str(&[self.config.action_dim]),
            params: self.head.param_count(),
        });
        rows
    }
}

/// Action-value network `Q(S, a)`.
#[derive(Clone, Debug)]
pub struct Critic {
    config: NetConfig,
    params: ParamSet,
    state_encoder: StateEncoder,
    action_encoder: ActionEncoder,
    merge: Dense,
    head: Dense,
}

impl Critic {
    pub fn new(config: NetConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let mut params = ParamSet::new();
        let state_encoder = StateEncoder::new(&mut params, &config, rng)?;
        let action_encoder = ActionEncoder::new(&mut params, &config, rng)?;
        let merge = Dense::new(
            &mut params,
            "merge",
            2 * config.hidden,
            config.hidden,
            Activation::Relu,
            rng,
        );
        let head = Dense::new_small(
            &mut params,
            "q",
            config.hidden,
            1,
            Activation::Identity,
            3e-3,
            rng,
        );
        Ok(Self {
            config,
            params,
            state_encoder,
            action_encoder,
            merge,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `states` `[B,window,H,W]`, `actions` `[B,action_dim]`; output `[B,1]`.
    pub fn forward(&self, f: &mut Forward, states: Var, actions: Var) -> Result<Pass> {
        let binding = self.params.bind(f.tape);
        self.run(f, states, actions, binding)
    }

    /// Forward pass with the parameters held constant; gradients still reach
    /// `states` and `actions`.
    pub fn forward_frozen(&self, f: &mut Forward, states: Var, actions: Var) -> Result<Pass> {
        let binding = self.params.bind_frozen(f.tape);
        self.run(f, states, actions, binding)
    }

    fn run(&self, f: &mut Forward, states: Var, actions: Var, binding: Binding) -> Result<Pass> {
        let s = self
            .state_encoder
            .forward(f, &binding, &self.params, &self.config, states)?;
        let a = self
            .action_encoder
            .forward(f, &binding, &self.params, &self.config, actions)?;
        let joined = f.tape.concat(&[s, a], 1)?;
        let z = self.merge.forward(f, &binding, joined)?;
        let output = self.head.forward(f, &binding, z)?;
        Ok(Pass { output, binding })
    }

    pub fn describe(&self) -> Vec<LayerSummary> {
        let mut rows = Vec::new();
        self.state_encoder.describe(&self.config, &mut rows);
        self.action_encoder.describe(&self.config, &mut rows);
        rows.push(LayerSummary {
            branch: "merged",
            name: "concatenate",
            out_shape: shape_str(&[2 * self.config.hidden]),
            params: 0,
        });
        rows.push(LayerSummary {
            branch: "merged",
            name: "fully connected",
            out_shape: shape_str(&[self.config.hidden]),
            params: self.merge.param_count(),
        });
        rows.push(LayerSummary {
            branch: "merged",
            name: "q value",
            out_shape: shape_str(&[1]),
            params: self.head.param_count(),
        });
        rows
    }
}

/// Shared surface of [`Actor`] and [`Critic`] used for checkpoints and
/// target tracking.
pub trait Network {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    fn soft_update_from(&mut self, online: &Self, tau: f64) -> Result<()>
    where
        Self: Sized,
    {
        let src = online.params().clone();
        self.params_mut().soft_update_from(&src, tau)
    }

    fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        self.params_mut().load_checkpoint(ckpt, prefix)
    }
}

impl Network for Actor {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl Network for Critic {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}
