//! Generates a gravity-model traffic sequence on GEANT2 and prints how the
//! demand is spread, then round-trips it through CSV.
//!
//! cargo run --example gen_traffic -- [ilt] [steps]

use stdpg::netenv::{
    generate_gravity, read_traffic_csv, write_traffic_csv, GravityConfig, Topology,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ilt: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.5);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let topo = Topology::geant2();
    let config = GravityConfig {
        ilt,
        correlation: 0.8,
    };
    let seq = generate_gravity(&topo, &config, steps, 7)?;
    println!(
        "{} nodes, total capacity {:.0} Mbps, ILT {ilt}",
        topo.node_count(),
        topo.total_capacity()
    );
    for (t, tm) in seq.iter().enumerate() {
        let n = tm.size();
        let mut pairs: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, tm.get(i, j)))
            .collect();
        pairs.sort_by(|a, b| b.2.total_cmp(&a.2));
        let (i, j, top) = pairs[0];
        println!(
            "t={t}: total {:.1} Mbps, largest {} -> {} at {top:.1} Mbps",
            tm.total(),
            topo.nodes()[i],
            topo.nodes()[j]
        );
    }
    let mut csv = Vec::new();
    write_traffic_csv(&mut csv, &seq)?;
    let back = read_traffic_csv(&csv[..], topo.node_count())?;
    println!(
        "csv: {} bytes, round trip exact: {}",
        csv.len(),
        back == seq
    );
    Ok(())
}
