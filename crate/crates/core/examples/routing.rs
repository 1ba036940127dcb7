//! Decodes link weights into shortest paths and scores them with the
//! queueing delay model.
//!
//! cargo run --example routing

use stdpg::netenv::{compute_delay, decode_action, generate_traffic, mean_delay, Topology};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let topo = Topology::geant2();
    let tm = &generate_traffic(&topo, 0.6, 1, 3)?[0];
    let (src, dst) = (0, topo.node_count() - 1);

    let uniform = vec![0.5; topo.link_count()];
    // price the first link of the fewest-hop path out of use
    let mut detour = uniform.clone();
    let first = decode_action(&uniform, &topo)?.hops(src, dst)[0].link;
    detour[first] = 0.99;

    for (label, weights) in [("uniform", &uniform), ("detour", &detour)] {
        let routing = decode_action(weights, &topo)?;
        let report = compute_delay(&routing, tm, &topo)?;
        let path: Vec<&str> = routing
            .path(src, dst)
            .iter()
            .map(|&v| topo.nodes()[v].as_str())
            .collect();
        let busiest = report
            .link_loads()
            .iter()
            .enumerate()
            .map(|(d, load)| (d / 2, load / topo.links()[d / 2].capacity_mbps))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, 0.0));
        println!("{label}:");
        println!("  path {}", path.join(" -> "));
        println!(
            "  delay {:.3} ms on that pair, network mean {:.3} ms",
            report.delay(src, dst),
            mean_delay(&report)
        );
        println!(
            "  busiest link {} at {:.1}% utilization, {} overloaded",
            busiest.0,
            100.0 * busiest.1,
            report.overloaded_links(&topo)
        );
    }
    Ok(())
}
