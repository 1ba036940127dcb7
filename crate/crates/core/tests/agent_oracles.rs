use std::sync::Arc;

use stdpg::agent::{ActorCriticPair, AgentConfig};
use stdpg::netenv::{Env, EnvConfig, Topology};
use stdpg::nn::{BackboneKind, Forward};
use stdpg::replay::{PerBuffer, PerConfig, Transition};
use stdpg::rng::seeded;
use stdpg::tensor::{Tape, Tensor};

fn triangle() -> Arc<Topology> {
    Arc::new(
        Topology::from_edges(
            "tri",
            3,
            &[(0, 1, 100.0, 1.0), (1, 2, 100.0, 1.0), (0, 2, 100.0, 2.0)],
        )
        .unwrap(),
    )
}

fn config(kind: BackboneKind) -> AgentConfig {
    AgentConfig {
        backbone: kind,
        window: 2,
        batch: 4,
        episode_len: 8,
        per: PerConfig {
            capacity: 16,
            ..PerConfig::default()
        },
        ..AgentConfig::default()
    }
}

fn transitions(pair: &ActorCriticPair, topo: &Arc<Topology>, cfg: &AgentConfig) -> Vec<Transition> {
    let mut env = Env::new(
        topo.clone(),
        &EnvConfig::new(0.4, cfg.episode_len, cfg.window),
        3,
    )
    .unwrap();
    let mut rng = seeded(5);
    let mut s = env.reset();
    let mut out = Vec::new();
    while !env.is_done() {
        let a = pair.act(&s, 0.2, &mut rng).unwrap();
        let step = env.step(&a).unwrap();
        out.push(Transition {
            state: s,
            action: a,
            reward: -step.delay_ms / 10.0,
            next: step.next.clone(),
            done: step.done,
        });
        s = step.next;
    }
    out
}

// sum_i c . mu(S_i) with the actor in training mode and a fixed dropout stream
fn linear_objective(pair: &ActorCriticPair, states: &Tensor, c: &Tensor, mask_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(states.clone());
    let mut rng = seeded(mask_seed);
    let mut f = Forward::train(&mut tape, &mut rng);
    let out = pair.actor.forward(&mut f, s).unwrap().output;
    let mu = tape.value(out);
    mu.data().iter().zip(c.data()).map(|(m, c)| m * c).sum()
}

#[test]
fn policy_gradient_for_a_linear_critic_matches_finite_differences() {
    let topo = triangle();
    for kind in BackboneKind::ALL {
        let cfg = config(kind);
        let mut pair = ActorCriticPair::for_topology(&topo, &cfg).unwrap();
        let batch = transitions(&pair, &topo, &cfg);
        let states = pair.state_batch(batch[..3].iter().map(|t| &t.state));
        // Q(s, a) = c . a, the same c for every row
        let c_row = [0.7, -1.3, 0.4];
        let c = Tensor::new(vec![3, 3], c_row.iter().copied().cycle().take(9).collect()).unwrap();

        let analytic = pair.policy_gradient(&states, &c, &mut seeded(11)).unwrap();
        let ids = pair.actor.params().trainable_ids();
        assert_eq!(analytic.len(), ids.len());
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (k, id) in ids.iter().enumerate() {
            let n = pair.actor.params().get(*id).len();
            for i in [0, n / 2, n - 1] {
                let x = pair.actor.params().get(*id).data()[i];
                pair.actor.params_mut().get_mut(*id).data_mut()[i] = x + h;
                let up = linear_objective(&pair, &states, &c, 11);
                pair.actor.params_mut().get_mut(*id).data_mut()[i] = x - h;
                let down = linear_objective(&pair, &states, &c, 11);
                pair.actor.params_mut().get_mut(*id).data_mut()[i] = x;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[k].data()[i];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
            }
        }
        assert!(worst <= 1e-4, "{kind}: relative error {worst:e}");
    }
}

#[test]
fn critic_target_matches_hand_assembled_bootstrap() {
    let topo = triangle();
    let cfg = config(BackboneKind::CnnLstmTam);
    let pair = ActorCriticPair::for_topology(&topo, &cfg).unwrap();
    let all = transitions(&pair, &topo, &cfg);
    let batch: Vec<&Transition> = all.iter().collect();
    let gamma = 0.9;
    let y = pair.critic_target(&batch, gamma).unwrap();

    for (t, y) in batch.iter().zip(&y) {
        let mut tape = Tape::new();
        let s = tape.constant(pair.state_batch([&t.next]));
        let mut f = Forward::eval(&mut tape);
        let a = pair.target_actor.forward_frozen(&mut f, s).unwrap().output;
        let q = pair
            .target_critic
            .forward_frozen(&mut f, s, a)
            .unwrap()
            .output;
        let q = tape.value(q).data()[0];
        let expected = if t.done {
            t.reward
        } else {
            t.reward + gamma * q
        };
        assert!(
            (y - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
            "{y} vs {expected}"
        );
    }
    assert!(batch.last().unwrap().done);
}

#[test]
fn soft_update_scalar_arithmetic() {
    let topo = triangle();
    let cfg = config(BackboneKind::Ffnn);
    let mut pair = ActorCriticPair::for_topology(&topo, &cfg).unwrap();
    for id in pair.actor.params().trainable_ids() {
        pair.actor.params_mut().get_mut(id).data_mut().fill(1.0);
        pair.target_actor
            .params_mut()
            .get_mut(id)
            .data_mut()
            .fill(0.0);
    }
    pair.soft_update(0.001).unwrap();
    for id in pair.target_actor.params().trainable_ids() {
        assert!(pair
            .target_actor
            .params()
            .get(id)
            .data()
            .iter()
            .all(|v| (v - 0.001).abs() < 1e-15));
    }
}

#[test]
fn zero_learning_rates_change_nothing_but_targets_and_priorities() {
    let topo = triangle();
    let cfg = AgentConfig {
        actor_lr: 0.0,
        critic_lr: 0.0,
        ..config(BackboneKind::CnnLstmTam)
    };
    let mut pair = ActorCriticPair::for_topology(&topo, &cfg).unwrap();
    let mut buffer = PerBuffer::new(cfg.per.clone()).unwrap();
    for t in transitions(&pair, &topo, &cfg) {
        buffer.push(t);
    }
    let trainable = |p: &stdpg::nn::ParamSet| -> Vec<Tensor> {
        p.iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.clone())
            .collect()
    };
    let actor = trainable(pair.actor.params());
    let critic = trainable(pair.critic.params());
    let before: Vec<f64> = buffer
        .indices()
        .iter()
        .map(|i| buffer.priority_of(*i).unwrap())
        .collect();
    let report = pair
        .train_step(&mut buffer, &cfg, &mut seeded(1), &mut seeded(2))
        .unwrap();
    assert_eq!(trainable(pair.actor.params()), actor);
    assert_eq!(trainable(pair.critic.params()), critic);
    assert_eq!(report.indices.len(), cfg.batch);
    assert!(report
        .td_errors
        .iter()
        .chain(&report.q_grad_norms)
        .all(|v| v.is_finite()));
    let after: Vec<f64> = buffer
        .indices()
        .iter()
        .map(|i| buffer.priority_of(*i).unwrap())
        .collect();
    assert_ne!(before, after);
}
