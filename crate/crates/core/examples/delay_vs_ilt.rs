//! Mean delay of the uniform-weight (fewest hops) policy on GEANT2 at each
//! traffic intensity level.
//!
//! cargo run --release --example delay_vs_ilt -- [steps]

use std::sync::Arc;

use stdpg::netenv::{Env, EnvConfig, Topology};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(200);
    let topo = Arc::new(Topology::geant2());
    let uniform = vec![0.5; topo.link_count()];
    println!("{:>5} {:>12} {:>10}", "ilt", "median_ms", "overloaded");
    for ilt in [0.2, 0.4, 0.6, 0.8, 1.0] {
        let mut env = Env::new(topo.clone(), &EnvConfig::new(ilt, steps, 1), 42)?;
        let mut delays = Vec::new();
        let mut overloaded = 0;
        while !env.is_done() {
            let out = env.step(&uniform)?;
            overloaded += out.report.overloaded_links(&topo);
            delays.push(out.delay_ms);
        }
        println!(
            "{ilt:>5.1} {:>12.3} {:>10.2}",
            median(delays),
            overloaded as f64 / steps as f64
        );
    }
    Ok(())
}
