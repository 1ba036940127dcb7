//! Finite-difference check of each layer type and of the full networks.
//!
//! cargo run --release --example grad_check -- [seed]

use stdpg::harness::gradcheck::{layer_suite, network_suite, GradCheckConfig};
use stdpg::nn::BackboneKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(0);
    let config = GradCheckConfig::default();
    let mut reports = layer_suite(seed, &config)?;
    for kind in BackboneKind::ALL {
        reports.extend(network_suite(seed, kind, &config)?);
    }
    println!(
        "{:<28} {:>8} {:>6} {:>12}",
        "check", "entries", "kinks", "max rel err"
    );
    for r in &reports {
        println!(
            "{:<28} {:>8} {:>6} {:>12.3e}",
            r.name, r.checked, r.kinks, r.max_rel_error
        );
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    if let Some(w) = worst.and_then(|r| r.worst.as_ref().map(|e| (r, e))) {
        println!(
            "worst: {} {}[{}] analytic {:.6e} numeric {:.6e}",
            w.0.name, w.1.tensor, w.1.index, w.1.analytic, w.1.numeric
        );
    }
    Ok(())
}
