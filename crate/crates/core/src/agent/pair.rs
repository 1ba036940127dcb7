use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::{AgentConfig, AgentError, Result};
use crate::netenv::{StateWindow, Topology};
use crate::nn::{Actor, Critic, Forward, NetConfig, Network};
use crate::replay::{PerBuffer, SampleIndex, Transition};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{AdamConfig, AdamState, Checkpoint, Tape, Tensor};

/// Actions are kept this far inside (0,1).
pub const ACTION_MARGIN: f64 = 1e-6;

pub fn clamp_action(a: &mut [f64]) {
    for v in a {
        *v = v.clamp(ACTION_MARGIN, 1.0 - ACTION_MARGIN);
    }
}

/// Online and target networks with their optimizers.
#[derive(Clone, Debug)]
pub struct ActorCriticPair {
    pub actor: Actor,
    pub critic: Critic,
    pub target_actor: Actor,
    pub target_critic: Critic,
    actor_opt: AdamState,
    critic_opt: AdamState,
    /// Demands are multiplied by this before entering either network.
    state_scale: f64,
}

/// Outcome of one [`ActorCriticPair::train_step`].
#[derive(Clone, Debug)]
pub struct StepReport {
    pub critic_loss: f64,
    /// Mean `Q(S, mu(S))` under the online critic before the actor moved.
    pub actor_objective: f64,
    pub indices: Vec<SampleIndex>,
    pub td_errors: Vec<f64>,
    pub q_grad_norms: Vec<f64>,
}

fn global_clip(grads: &mut [Tensor], max_norm: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if let Some(limit) = max_norm {
        if norm > limit {
            let k = limit / norm;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}

impl ActorCriticPair {
    pub fn new(
        net: NetConfig,
        actor_lr: f64,
        critic_lr: f64,
        state_scale: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let actor = Actor::new(net.clone(), rng)?;
        let critic = Critic::new(net, rng)?;
        let actor_opt = AdamState::new(
            AdamConfig::with_lr(actor_lr),
            actor
                .params()
                .iter()
                .filter(|p| p.trainable)
                .map(|p| &p.value),
        );
        let critic_opt = AdamState::new(
            AdamConfig::with_lr(critic_lr),
            critic
                .params()
                .iter()
                .filter(|p| p.trainable)
                .map(|p| &p.value),
        );
        Ok(Self {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
            state_scale,
        })
    }

    /// Networks sized for `topology`, initialized from `config.seed`. Inputs
    /// are scaled so the mean per-pair demand at full load is 1.
    pub fn for_topology(topology: &Topology, config: &AgentConfig) -> Result<Self> {
        config.validate()?;
        let n = topology.node_count();
        let mut net = NetConfig::new(
            config.backbone,
            (n - 1, n),
            config.window,
            topology.link_count(),
        );
        net.trainable_attention = config.trainable_attention;
        let state_scale = (n * (n - 1)) as f64 / topology.total_capacity();
        let mut rng = seeded(derive_seed(config.seed, 1));
        Self::new(
            net,
            config.actor_lr,
            config.critic_lr,
            state_scale,
            &mut rng,
        )
    }

    pub fn state_scale(&self) -> f64 {
        self.state_scale
    }

    pub fn action_dim(&self) -> usize {
        self.actor.config().action_dim
    }

    /// Scaled `[B, W, H, W']` batch.
    pub fn state_batch<'a>(&self, windows: impl IntoIterator<Item = &'a StateWindow>) -> Tensor {
        StateWindow::batch(windows).map(|v| v * self.state_scale)
    }

    /// Noise-free policy output, in (0,1) per component.
    pub fn policy(&self, window: &StateWindow) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let s = tape.constant(self.state_batch([window]));
        let mut f = Forward::eval(&mut tape);
        let out = self.actor.forward_frozen(&mut f, s)?.output;
        Ok(tape.value(out).data().to_vec())
    }

    /// Policy plus `N(0, noise_scale^2)` noise, clamped back inside (0,1).
    pub fn act(
        &self,
        window: &StateWindow,
        noise_scale: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        let mut a = self.policy(window)?;
        if noise_scale > 0.0 {
            for v in &mut a {
                *v += noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        clamp_action(&mut a);
        Ok(a)
    }

    /// `y = r + gamma * (1 - done) * Q'(S', mu'(S'))` with both target networks in eval mode.
    pub fn critic_target(&self, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
        let next = self.state_batch(batch.iter().map(|t| &t.next));
        let mut tape = Tape::new();
        let s = tape.constant(next);
        let mut f = Forward::eval(&mut tape);
        let a = self.target_actor.forward_frozen(&mut f, s)?.output;
        let q = self.target_critic.forward_frozen(&mut f, s, a)?.output;
        let q = tape.value(q).data();
        Ok(batch
            .iter()
            .zip(q)
            .map(|(t, q)| {
                if t.done {
                    t.reward
                } else {
                    t.reward + gamma * q
                }
            })
            .collect())
    }

    /// Online-critic values and `dQ/da` rows at the given actions, critic in eval mode.
    pub fn action_gradient(&self, states: &Tensor, actions: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let a = tape.leaf(actions.clone());
        let mut f = Forward::eval(&mut tape);
        let q = self.critic.forward_frozen(&mut f, s, a)?.output;
        let values = tape.value(q).data().to_vec();
        let total = tape.sum(q)?;
        let mut grads = tape.backward(total)?;
        let g = grads
            .take(a)
            .unwrap_or_else(|| Tensor::zeros(actions.shape()));
        Ok((values, g))
    }

    /// Parameter gradients of `sum_i dq_da_i . mu(S_i)` for the actor in
    /// training mode: the deterministic policy gradient for a critic whose
    /// action gradient is the constant `dq_da`.
    pub fn policy_gradient(
        &self,
        states: &Tensor,
        dq_da: &Tensor,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Tensor>> {
        Ok(self.actor_backward(states, rng, |_| Ok(dq_da.clone()))?.0)
    }

    // Runs the actor in training mode, asks `weights` for the per-action
    // multipliers given the produced actions and backpropagates their dot
    // product with the output.
    fn actor_backward(
        &self,
        states: &Tensor,
        rng: &mut dyn RngCore,
        weights: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<(Vec<Tensor>, Vec<crate::nn::RunningUpdate>)> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let mut f = Forward::train(&mut tape, rng);
        let pass = self.actor.forward(&mut f, s)?;
        let running = f.take_running_updates();
        let w = weights(tape.value(pass.output))?;
        if w.shape() != tape.value(pass.output).shape() {
            return Err(AgentError::Config(format!(
                "action gradient shape {:?} does not match actions {:?}",
                w.shape(),
                tape.value(pass.output).shape()
            )));
        }
        let c = tape.constant(w);
        let prod = tape.mul(pass.output, c)?;
        let total = tape.sum(prod)?;
        let grads = tape.backward(total)?;
        Ok((
            self.actor.params().gradients(&pass.binding, &grads),
            running,
        ))
    }

    /// One critic update, one actor update, priority refresh and soft target updates.
    pub fn train_step(
        &mut self,
        buffer: &mut PerBuffer,
        config: &AgentConfig,
        sample_rng: &mut dyn RngCore,
        dropout_rng: &mut dyn RngCore,
    ) -> Result<StepReport> {
        let indices = buffer.sample(config.batch, sample_rng)?;
        let weights = buffer.importance_weights(&indices);
        let batch: Vec<&Transition> = indices
            .iter()
            .map(|i| buffer.get(*i).expect("sampled entries are resident"))
            .collect();
        let b = batch.len();
        let states = self.state_batch(batch.iter().map(|t| &t.state));
        let dim = self.action_dim();
        let actions = Tensor::new(
            vec![b, dim],
            batch
                .iter()
                .flat_map(|t| t.action.iter().copied())
                .collect(),
        )?;
        let y = self.critic_target(&batch, config.gamma)?;

        // critic: weighted mean squared TD error
        let (critic_loss, td_errors) = {
            let mut tape = Tape::new();
            let s = tape.constant(states.clone());
            let a = tape.constant(actions.clone());
            let mut f = Forward::train(&mut tape, dropout_rng);
            let pass = self.critic.forward(&mut f, s, a)?;
            let running = f.take_running_updates();
            let q = pass.output;
            let td: Vec<f64> = tape
                .value(q)
                .data()
                .iter()
                .zip(&y)
                .map(|(q, y)| q - y)
                .collect();
            let target = tape.constant(Tensor::new(vec![b, 1], y.clone())?);
            let w = tape.constant(Tensor::new(vec![b, 1], weights)?);
            let diff = tape.sub(q, target)?;
            let sq = tape.mul(diff, diff)?;
            let weighted = tape.mul(sq, w)?;
            let loss = tape.mean(weighted)?;
            let loss_value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            let mut g = self.critic.params().gradients(&pass.binding, &grads);
            global_clip(&mut g, config.grad_clip);
            let refs: Vec<&Tensor> = g.iter().collect();
            self.critic_opt
                .step(&mut self.critic.params_mut().trainable_mut(), &refs)?;
            self.critic.params_mut().apply_running(&running);
            (loss_value, td)
        };

        // actor: ascend Q(S, mu(S)) through the updated critic
        let actor_objective = {
            let mut objective = 0.0;
            let (mut g, running) = self.actor_backward(&states, dropout_rng, |mu| {
                let (q, dq) = self.action_gradient(&states, mu)?;
                objective = q.iter().sum::<f64>() / b as f64;
                Ok(dq.map(|v| -v / b as f64))
            })?;
            global_clip(&mut g, config.grad_clip);
            let refs: Vec<&Tensor> = g.iter().collect();
            self.actor_opt
                .step(&mut self.actor.params_mut().trainable_mut(), &refs)?;
            self.actor.params_mut().apply_running(&running);
            objective
        };

        let (_, stored_grad) = self.action_gradient(&states, &actions)?;
        let q_grad_norms: Vec<f64> = stored_grad
            .data()
            .chunks(dim)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        buffer.update_priorities(&indices, &td_errors, &q_grad_norms)?;
        self.soft_update(config.tau)?;

        Ok(StepReport {
            critic_loss,
            actor_objective,
            indices,
            td_errors,
            q_grad_norms,
        })
    }

    /// `target <- tau * online + (1 - tau) * target` for both networks.
    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        self.target_actor.soft_update_from(&self.actor, tau)?;
        self.target_critic.soft_update_from(&self.critic, tau)?;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut named = self.actor.params().to_checkpoint("actor/");
        named.extend(self.critic.params().to_checkpoint("critic/"));
        named.extend(self.target_actor.params().to_checkpoint("target_actor/"));
        named.extend(self.target_critic.params().to_checkpoint("target_critic/"));
        let scale = Tensor::scalar(self.state_scale);
        named.push(("state_scale".to_owned(), &scale));
        Checkpoint::from_tensors(named)
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.actor.load_from(ckpt, "actor/")?;
        self.critic.load_from(ckpt, "critic/")?;
        self.target_actor.load_from(ckpt, "target_actor/")?;
        self.target_critic.load_from(ckpt, "target_critic/")?;
        if let Some(s) = ckpt.get("state_scale").and_then(|t| t.item()) {
            self.state_scale = s;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netenv::{Env, EnvConfig};
    use crate::nn::BackboneKind;
    use crate::replay::PerConfig;
    use std::sync::Arc;

    fn tiny_topology() -> Arc<Topology> {
        Arc::new(
            Topology::from_edges(
                "tri",
                3,
                &[(0, 1, 100.0, 1.0), (1, 2, 100.0, 1.0), (0, 2, 100.0, 2.0)],
            )
            .unwrap(),
        )
    }

    fn tiny_config(kind: BackboneKind) -> AgentConfig {
        AgentConfig {
            backbone: kind,
            window: 2,
            batch: 4,
            episode_len: 8,
            epochs: 1,
            per: PerConfig {
                capacity: 16,
                ..PerConfig::default()
            },
            ..AgentConfig::default()
        }
    }

    fn filled_buffer(pair: &ActorCriticPair, topo: &Arc<Topology>, cfg: &AgentConfig) -> PerBuffer {
        let mut env = Env::new(
            topo.clone(),
            &EnvConfig::new(0.4, cfg.episode_len, cfg.window),
            3,
        )
        .unwrap();
        let mut buf = PerBuffer::new(cfg.per.clone()).unwrap();
        let mut rng = seeded(5);
        let mut s = env.reset();
        while !env.is_done() {
            let a = pair.act(&s, 0.2, &mut rng).unwrap();
            let out = env.step(&a).unwrap();
            buf.push(Transition {
                state: s,
                action: a,
                reward: -out.delay_ms / 10.0,
                next: out.next.clone(),
                done: out.done,
            });
            s = out.next;
        }
        buf
    }

    #[test]
    fn targets_start_as_copies() {
        let topo = tiny_topology();
        let pair =
            ActorCriticPair::for_topology(&topo, &tiny_config(BackboneKind::CnnLstmTam)).unwrap();
        assert_eq!(pair.actor.params(), pair.target_actor.params());
        assert_eq!(pair.critic.params(), pair.target_critic.params());
    }

    #[test]
    fn act_is_deterministic_without_noise_and_inside_unit() {
        let topo = tiny_topology();
        let pair =
            ActorCriticPair::for_topology(&topo, &tiny_config(BackboneKind::CnnLstmTam)).unwrap();
        let env = Env::new(topo.clone(), &EnvConfig::new(0.5, 4, 2), 1).unwrap();
        let w = env.window();
        let mut rng = seeded(0);
        assert_eq!(
            pair.act(&w, 0.0, &mut rng).unwrap(),
            pair.act(&w, 0.0, &mut rng).unwrap()
        );
        for _ in 0..200 {
            let a = pair.act(&w, 5.0, &mut rng).unwrap();
            assert_eq!(a.len(), 3);
            assert!(a.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn gamma_zero_and_terminal_targets_equal_reward() {
        let topo = tiny_topology();
        let cfg = tiny_config(BackboneKind::Ffnn);
        let pair = ActorCriticPair::for_topology(&topo, &cfg).unwrap();
        let buf = filled_buffer(&pair, &topo, &cfg);
        let batch: Vec<&Transition> = buf
            .indices()
            .into_iter()
            .map(|i| buf.get(i).unwrap())
            .collect();
        let y = pair.critic_target(&batch, 0.0).unwrap();
        for (t, y) in batch.iter().zip(&y) {
            assert_eq!(*y, t.reward);
        }
        let y = pair.critic_target(&batch, 0.99).unwrap();
        let last = batch.iter().position(|t| t.done).unwrap();
        assert_eq!(y[last], batch[last].reward);
    }

    #[test]
    fn zero_learning_rates_leave_online_params() {
        let topo = tiny_topology();
        let cfg = AgentConfig {
            actor_lr: 0.0,
            critic_lr: 0.0,
            ..tiny_config(BackboneKind::CnnLstmTam)
        };
        let mut pair = ActorCriticPair::for_topology(&topo, &cfg).unwrap();
        let mut buf = filled_buffer(&pair, &topo, &cfg);
        let trainable = |p: &crate::nn::ParamSet| -> Vec<Tensor> {
            p.iter()
                .filter(|p| p.trainable)
                .map(|p| p.value.clone())
                .collect()
        };
        let before = (
            trainable(pair.actor.params()),
            trainable(pair.critic.params()),
        );
        let rep = pair
            .train_step(&mut buf, &cfg, &mut seeded(1), &mut seeded(2))
            .unwrap();
        assert_eq!(trainable(pair.actor.params()), before.0);
        assert_eq!(trainable(pair.critic.params()), before.1);
        assert_eq!(rep.td_errors.len(), 4);
        assert_eq!(rep.q_grad_norms.len(), 4);
        assert!(rep.critic_loss.is_finite());
    }

    #[test]
    fn soft_update_moves_targets_by_tau() {
        let topo = tiny_topology();
        let cfg = AgentConfig {
            tau: 0.25,
            ..tiny_config(BackboneKind::Ffnn)
        };
        let mut pair = ActorCriticPair::for_topology(&topo, &cfg).unwrap();
        let mut buf = filled_buffer(&pair, &topo, &cfg);
        // push online and target apart first
        pair.train_step(&mut buf, &cfg, &mut seeded(1), &mut seeded(2))
            .unwrap();
        let target_before = pair.target_critic.params().clone();
        pair.train_step(&mut buf, &cfg, &mut seeded(3), &mut seeded(4))
            .unwrap();
        for ((t0, t1), o) in target_before
            .iter()
            .zip(pair.target_critic.params().iter())
            .zip(pair.critic.params().iter())
        {
            for ((a, b), c) in t0
                .value
                .data()
                .iter()
                .zip(t1.value.data())
                .zip(o.value.data())
            {
                assert!((b - (a + 0.25 * (c - a))).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let topo = tiny_topology();
        let cfg = tiny_config(BackboneKind::CnnLstmTam);
        let pair = ActorCriticPair::for_topology(&topo, &cfg).unwrap();
        let ck = pair.to_checkpoint();
        let mut other =
            ActorCriticPair::for_topology(&topo, &AgentConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(other.actor.params(), pair.actor.params());
        other.load_checkpoint(&ck).unwrap();
        assert_eq!(other.actor.params(), pair.actor.params());
        assert_eq!(other.target_critic.params(), pair.target_critic.params());
    }
}
