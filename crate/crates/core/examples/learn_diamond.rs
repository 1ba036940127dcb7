//! Learns to route around a thin direct link on a 4-node diamond.
//!
//! Nodes 0 and 3 are joined directly by a 1 Mbps link and through 1 and 2 by
//! 100 Mbps links. Fewest-hop routing overloads the direct link; a trained
//! agent should move the 0<->3 demand onto the detours.
//!
//! cargo run --release --example learn_diamond -- [ilt] [epochs] [seed]

use std::sync::Arc;

use stdpg::agent::{evaluate, evaluation_envs, ActorCriticPair, AgentConfig, Trainer};
use stdpg::netenv::{Env, EnvConfig, GravityConfig, Topology};

fn fixed_policy(envs: Vec<Env>, action: &[f64]) -> Result<f64, Box<dyn std::error::Error>> {
    let count = envs.len() as f64;
    let mut mean = 0.0;
    for mut env in envs {
        let mut total = 0.0;
        while !env.is_done() {
            total += env.step(action)?.delay_ms;
        }
        mean += total / env.episode_len() as f64 / count;
    }
    Ok(mean)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ilt: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.3);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let topo = Arc::new(Topology::from_edges(
        "diamond",
        4,
        &[
            (0, 1, 100.0, 1.0),
            (1, 3, 100.0, 1.0),
            (0, 3, 1.0, 1.0),
            (0, 2, 100.0, 1.0),
            (2, 3, 100.0, 1.0),
        ],
    )?);
    let config = AgentConfig {
        episode_len: 100,
        epochs,
        seed,
        ..AgentConfig::default()
    };
    let env_cfg = EnvConfig::new(ilt, 50, config.window);
    let eval = || evaluation_envs(&topo, &env_cfg, 10, 999);

    let untrained = evaluate(&ActorCriticPair::for_topology(&topo, &config)?, eval()?)?
        .summary
        .mean;
    let fewest_hops = fixed_policy(eval()?, &[0.5; 5])?;
    let detour = fixed_policy(eval()?, &[0.2, 0.2, 0.9, 0.2, 0.2])?;

    let mut trainer = Trainer::new(topo.clone(), GravityConfig::new(ilt), config)?;
    for _ in 0..epochs {
        let m = trainer.run_epoch()?;
        let e = evaluate(trainer.pair(), eval()?)?.summary.mean;
        println!(
            "epoch {}  train {:>10.2} ms  eval {:>10.2} ms  critic loss {:.4}",
            m.epoch,
            m.mean_delay_ms,
            e,
            m.critic_loss.unwrap_or(f64::NAN)
        );
    }
    let trained = evaluate(trainer.pair(), eval()?)?.summary.mean;
    println!("untrained    {untrained:>10.2} ms");
    println!("fewest hops  {fewest_hops:>10.2} ms");
    println!("hand detour  {detour:>10.2} ms");
    println!("trained      {trained:>10.2} ms");
    println!("weights {:?}", trainer.pair().policy(&eval()?[0].window())?);
    Ok(())
}
