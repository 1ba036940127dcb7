//! A scaled-down experiment: several ILT levels, checkpoints at two epoch
//! counts, every artifact written under a temporary directory.
//!
//! cargo run --release --example run_experiment -- [out_dir]

use stdpg::agent::AgentConfig;
use stdpg::harness::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("stdpg-example-run"));
    let config = ExperimentConfig {
        ilts: vec![0.2, 0.6, 1.0],
        epochs: vec![1, 2],
        eval_sequences: 5,
        agent: AgentConfig {
            episode_len: 40,
            ..AgentConfig::default()
        },
        out_dir,
        ..ExperimentConfig::default()
    };
    let outcome = run_experiment(&config)?;
    println!(
        "{:>5} {:>6} {:>10} {:>10} {:>10}",
        "ilt", "epoch", "q1", "median", "q3"
    );
    for row in &outcome.summaries {
        println!(
            "{:>5.1} {:>6} {:>10.2} {:>10.2} {:>10.2}",
            row.ilt, row.epoch, row.q1, row.median, row.q3
        );
    }
    let mut files: Vec<_> = std::fs::read_dir(&outcome.out_dir)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    files.sort();
    println!(
        "wrote to {}: {}",
        outcome.out_dir.display(),
        files.join(", ")
    );
    Ok(())
}
