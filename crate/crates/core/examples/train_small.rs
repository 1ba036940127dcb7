//! Trains each backbone for a few short epochs on GEANT2 and compares the
//! noise-free evaluation delay with the fewest-hop baseline.
//!
//! cargo run --release --example train_small -- [epochs]

use std::sync::Arc;

use stdpg::agent::{evaluate, evaluation_envs, train, AgentConfig};
use stdpg::netenv::{EnvConfig, GravityConfig, Topology};
use stdpg::nn::BackboneKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(3);
    let topo = Arc::new(Topology::geant2());
    let ilt = 0.6;
    let env_cfg = EnvConfig::new(ilt, 20, 4);

    let mut baseline = 0.0;
    for mut env in evaluation_envs(&topo, &env_cfg, 5, 100)? {
        let uniform = vec![0.5; topo.link_count()];
        let mut total = 0.0;
        while !env.is_done() {
            total += env.step(&uniform)?.delay_ms;
        }
        baseline += total / env.episode_len() as f64 / 5.0;
    }
    println!("fewest hops: {baseline:.2} ms");

    for kind in BackboneKind::ALL {
        let config = AgentConfig {
            backbone: kind,
            episode_len: 50,
            epochs,
            ..AgentConfig::default()
        };
        let (pair, metrics) = train(topo.clone(), GravityConfig::new(ilt), config)?;
        let report = evaluate(&pair, evaluation_envs(&topo, &env_cfg, 5, 100)?)?;
        let last = metrics.last().expect("at least one epoch");
        println!(
            "{kind:<13} train {:>9.2} ms  critic loss {:>8.4}  eval median {:>9.2} ms",
            last.mean_delay_ms,
            last.critic_loss.unwrap_or(f64::NAN),
            report.summary.median
        );
    }
    Ok(())
}
