//! Prints the layer table and parameter counts of every backbone on GEANT2.
//!
//! cargo run --example describe_model

use stdpg::nn::{render_table, Actor, BackboneKind, Critic, NetConfig};
use stdpg::rng::seeded;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = seeded(0);
    for kind in BackboneKind::ALL {
        let net = NetConfig::geant2(kind, 4);
        let actor = Actor::new(net.clone(), &mut rng)?;
        let critic = Critic::new(net, &mut rng)?;
        println!("== {kind} actor ==");
        print!("{}", render_table(&actor.describe()));
        println!("== {kind} critic ==");
        print!("{}", render_table(&critic.describe()));
        println!();
    }
    Ok(())
}
