use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::{reward_rows, write_csv, DelaySummaryRow};
use super::{HarnessError, Result};
use crate::agent::{evaluate, evaluation_envs, AgentConfig, EpochMetrics, Trainer};
use crate::netenv::{EnvConfig, GravityConfig, Topology};
use crate::rng::derive_seed;

const STREAM_EVAL: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Topology JSON file; `None` uses the bundled GEANT2 graph.
    pub topology: Option<PathBuf>,
    pub ilts: Vec<f64>,
    /// Epoch counts after which the policy is evaluated and checkpointed.
    pub epochs: Vec<usize>,
    pub eval_sequences: usize,
    pub agent: AgentConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            topology: None,
            ilts: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            epochs: vec![10, 20, 30, 40, 50, 60],
            eval_sequences: 100,
            agent: AgentConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.ilts.is_empty() {
            return bad("at least one ILT is required".into());
        }
        if let Some(x) = self.ilts.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
            return bad(format!("ILT values must lie in (0,1], got {x}"));
        }
        if self.epochs.is_empty() || self.epochs.contains(&0) {
            return bad("epochs must be a nonempty list of positive counts".into());
        }
        if self.eval_sequences == 0 {
            return bad("at least one evaluation sequence is required".into());
        }
        self.agent.validate()?;
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology> {
        Ok(match &self.topology {
            Some(p) => Topology::load(p)?,
            None => Topology::geant2(),
        })
    }

    fn sorted_epochs(&self) -> Vec<usize> {
        let mut e = self.epochs.clone();
        e.sort_unstable();
        e.dedup();
        e
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    code_version: &'static str,
    config: &'a ExperimentConfig,
    topology: &'a str,
    runs: Vec<RunFiles>,
}

#[derive(Clone, Debug, Serialize)]
struct RunFiles {
    ilt: f64,
    seed: u64,
    metrics: String,
    rewards: String,
    checkpoints: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub summaries: Vec<DelaySummaryRow>,
    pub metrics: Vec<(f64, Vec<EpochMetrics>)>,
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".write-probe");
    File::create(&probe)?;
    fs::remove_file(probe)?;
    Ok(())
}

fn ilt_tag(ilt: f64) -> String {
    format!("ilt-{ilt}")
}

/// Trains one agent per ILT up to the largest listed epoch count, evaluating
/// and checkpointing at each listed count.
///
/// Writes into `out_dir`:
/// `manifest.json`, `metrics_<ilt>.csv`, `rewards_<ilt>.csv`,
/// `delay_summary.csv` and `checkpoints/<ilt>/epoch-<e>.{json,bin}`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let topology = Arc::new(config.topology()?);
    ensure_writable(&config.out_dir)?;
    let out = &config.out_dir;
    let schedule = config.sorted_epochs();
    let max_epochs = *schedule.last().expect("validated nonempty");

    let mut summaries = Vec::new();
    let mut all_metrics = Vec::new();
    let mut runs = Vec::new();
    for (k, &ilt) in config.ilts.iter().enumerate() {
        let tag = ilt_tag(ilt);
        let seed = derive_seed(config.seed, k as u64);
        let agent = AgentConfig {
            epochs: max_epochs,
            seed,
            ..config.agent.clone()
        };
        let eval_cfg = EnvConfig::new(ilt, agent.episode_len, agent.window);
        let eval_seed = derive_seed(config.seed, STREAM_EVAL);
        let mut trainer = Trainer::new(topology.clone(), GravityConfig::new(ilt), agent)?;
        let ckpt_dir = out.join("checkpoints").join(&tag);
        fs::create_dir_all(&ckpt_dir)?;

        let mut metrics = Vec::with_capacity(max_epochs);
        let mut checkpoints = Vec::new();
        for epoch in 1..=max_epochs {
            let m = trainer.run_epoch()?;
            log::info!("{tag} epoch {epoch}: mean delay {:.3} ms", m.mean_delay_ms);
            metrics.push(m);
            if schedule.binary_search(&epoch).is_ok() {
                let envs = evaluation_envs(&topology, &eval_cfg, config.eval_sequences, eval_seed)?;
                let report = evaluate(trainer.pair(), envs)?;
                summaries.push(DelaySummaryRow::new(ilt, epoch, &report.per_sequence)?);
                let stem = ckpt_dir.join(format!("epoch-{epoch}"));
                trainer.pair().to_checkpoint().save(&stem)?;
                checkpoints.push(
                    stem.strip_prefix(out)
                        .unwrap_or(&stem)
                        .display()
                        .to_string(),
                );
            }
        }

        let metrics_file = format!("metrics_{tag}.csv");
        write_csv(
            BufWriter::new(File::create(out.join(&metrics_file))?),
            &metrics,
        )?;
        let rewards_file = format!("rewards_{tag}.csv");
        write_csv(
            BufWriter::new(File::create(out.join(&rewards_file))?),
            &reward_rows(&metrics)?,
        )?;
        runs.push(RunFiles {
            ilt,
            seed,
            metrics: metrics_file,
            rewards: rewards_file,
            checkpoints,
        });
        all_metrics.push((ilt, metrics));
    }
    write_csv(
        BufWriter::new(File::create(out.join("delay_summary.csv"))?),
        &summaries,
    )?;
    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION"),
        config,
        topology: topology.name(),
        runs,
    };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(ExperimentOutcome {
        out_dir: out.clone(),
        summaries,
        metrics: all_metrics,
    })
}
