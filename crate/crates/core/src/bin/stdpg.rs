use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stdpg::agent::{evaluate, evaluation_envs, ActorCriticPair, NoiseKind, Trainer};
use stdpg::harness::gradcheck::{layer_suite, network_suite, GradCheckConfig};
use stdpg::harness::{run_experiment, write_csv, DelaySummaryRow, ExperimentConfig};
use stdpg::netenv::{generate_traffic, write_traffic_csv, EnvConfig, GravityConfig};
use stdpg::nn::{render_table, Actor, BackboneKind, Critic, NetConfig};
use stdpg::rng::seeded;
use stdpg::tensor::Checkpoint;

#[derive(Parser)]
#[command(
    name = "stdpg",
    version,
    about = "Delay-minimizing SDN routing with a CNN-LSTM actor-critic"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Precedence: flag, then
/// `STDPG_*` environment variable, then the `--config` file.
#[derive(Args)]
struct Common {
    /// JSON experiment config used as the base for every other setting.
    #[arg(long, global = true, env = "STDPG_CONFIG")]
    config: Option<PathBuf>,
    /// Topology JSON; the bundled GEANT2 graph when absent.
    #[arg(long, global = true, env = "STDPG_TOPOLOGY")]
    topology: Option<PathBuf>,
    /// Traffic intensity levels, comma separated.
    #[arg(long, global = true, env = "STDPG_ILT", value_delimiter = ',')]
    ilt: Option<Vec<f64>>,
    /// Epoch counts, comma separated; training runs to the largest.
    #[arg(long, global = true, env = "STDPG_EPOCHS", value_delimiter = ',')]
    epochs: Option<Vec<usize>>,
    /// Steps per episode (or sequence length for gen-traffic).
    #[arg(long, global = true, env = "STDPG_STEPS")]
    steps: Option<usize>,
    #[arg(long, global = true, env = "STDPG_WINDOW")]
    window: Option<usize>,
    #[arg(long, global = true, env = "STDPG_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "STDPG_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "STDPG_BACKBONE")]
    backbone: Option<BackboneKind>,
    #[arg(long, global = true, env = "STDPG_ALPHA")]
    alpha: Option<f64>,
    #[arg(long, global = true, env = "STDPG_BETA")]
    beta: Option<f64>,
    #[arg(long = "eps-per", global = true, env = "STDPG_EPS_PER")]
    eps_per: Option<f64>,
    /// Initial exploration noise scale.
    #[arg(long, global = true, env = "STDPG_NOISE")]
    noise: Option<f64>,
    /// Use Ornstein-Uhlenbeck exploration noise instead of Gaussian.
    #[arg(long, global = true, env = "STDPG_OU_NOISE")]
    ou_noise: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Actor,
    Critic,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent at the first ILT and write metrics plus a checkpoint.
    Train,
    /// Evaluate a saved checkpoint on held-out traffic sequences.
    Evaluate {
        /// Checkpoint path without extension.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        sequences: usize,
    },
    /// Write a gravity-model traffic sequence as CSV.
    GenTraffic,
    /// Print the per-layer parameter table.
    DescribeModel {
        #[arg(long, value_enum, default_value_t = Role::Actor)]
        role: Role,
    },
    /// Finite-difference check of every layer and of the full networks.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train and evaluate across ILT levels, writing every artifact.
    RunExperiment,
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn resolve(c: &Common) -> AnyResult<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = &c.topology {
        cfg.topology = Some(t.clone());
    }
    if let Some(v) = &c.ilt {
        cfg.ilts = v.clone();
    }
    if let Some(v) = &c.epochs {
        cfg.epochs = v.clone();
    }
    if let Some(v) = c.steps {
        cfg.agent.episode_len = v;
    }
    if let Some(v) = c.window {
        cfg.agent.window = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
        cfg.agent.seed = v;
    }
    if let Some(v) = &c.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = c.backbone {
        cfg.agent.backbone = v;
    }
    if let Some(v) = c.alpha {
        cfg.agent.per.alpha = v;
    }
    if let Some(v) = c.beta {
        cfg.agent.per.beta = v;
    }
    if let Some(v) = c.eps_per {
        cfg.agent.per.eps = v;
    }
    if let Some(v) = c.noise {
        cfg.agent.noise.sigma0 = v;
    }
    if c.ou_noise {
        cfg.agent.noise.kind = NoiseKind::OrnsteinUhlenbeck;
    }
    Ok(cfg)
}

fn print_summary(rows: &[DelaySummaryRow]) -> AnyResult<()> {
    write_csv(io::stdout().lock(), rows)?;
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> AnyResult<()> {
    cfg.validate()?;
    let topo = Arc::new(cfg.topology()?);
    let ilt = cfg.ilts[0];
    let mut agent = cfg.agent.clone();
    agent.epochs = cfg.epochs.iter().copied().max().unwrap_or(1);
    let mut trainer = Trainer::new(topo, GravityConfig::new(ilt), agent)?;
    let mut metrics = Vec::new();
    for _ in 0..trainer.config().epochs {
        let m = trainer.run_epoch()?;
        println!(
            "epoch {:>3}  mean delay {:>10.3} ms  noise {:.4}",
            m.epoch, m.mean_delay_ms, m.noise_scale
        );
        metrics.push(m);
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_csv(
        BufWriter::new(File::create(cfg.out_dir.join("metrics.csv"))?),
        &metrics,
    )?;
    let stem = cfg.out_dir.join("agent");
    trainer.pair().to_checkpoint().save(&stem)?;
    println!(
        "wrote {} and {}",
        cfg.out_dir.join("metrics.csv").display(),
        stem.display()
    );
    Ok(())
}

fn evaluate_checkpoint(cfg: &ExperimentConfig, stem: &Path, sequences: usize) -> AnyResult<()> {
    cfg.validate()?;
    let topo = Arc::new(cfg.topology()?);
    let mut pair = ActorCriticPair::for_topology(&topo, &cfg.agent)?;
    pair.load_checkpoint(&Checkpoint::load(stem)?)?;
    let mut rows = Vec::new();
    for &ilt in &cfg.ilts {
        let env_cfg = EnvConfig::new(ilt, cfg.agent.episode_len, cfg.agent.window);
        let report = evaluate(
            &pair,
            evaluation_envs(&topo, &env_cfg, sequences, cfg.seed)?,
        )?;
        rows.push(DelaySummaryRow::new(ilt, 0, &report.per_sequence)?);
    }
    print_summary(&rows)
}

/// CSV goes to `out` when given, stdout otherwise.
fn gen_traffic(cfg: &ExperimentConfig, out: Option<&Path>) -> AnyResult<()> {
    let topo = cfg.topology()?;
    let seq = generate_traffic(&topo, cfg.ilts[0], cfg.agent.episode_len, cfg.seed)?;
    match out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            write_traffic_csv(BufWriter::new(File::create(path)?), &seq)?;
        }
        None => write_traffic_csv(io::stdout().lock(), &seq)?,
    }
    Ok(())
}

fn describe(cfg: &ExperimentConfig, role: Role) -> AnyResult<()> {
    let topo = cfg.topology()?;
    let n = topo.node_count();
    let mut net = NetConfig::new(
        cfg.agent.backbone,
        (n - 1, n),
        cfg.agent.window,
        topo.link_count(),
    );
    net.trainable_attention = cfg.agent.trainable_attention;
    let mut rng = seeded(cfg.seed);
    let rows = match role {
        Role::Actor => Actor::new(net, &mut rng)?.describe(),
        Role::Critic => Critic::new(net, &mut rng)?.describe(),
    };
    print!("{}", render_table(&rows));
    Ok(())
}

fn grad_check(cfg: &ExperimentConfig, seeds: u64, tolerance: f64) -> AnyResult<bool> {
    let gc = GradCheckConfig::default();
    let mut worst = 0.0f64;
    let (mut checked, mut kinks) = (0, 0);
    for seed in 0..seeds {
        let s = cfg.seed.wrapping_add(seed);
        let mut reports = layer_suite(s, &gc)?;
        reports.extend(network_suite(s, cfg.agent.backbone, &gc)?);
        for r in reports {
            log::debug!(
                "seed {s} {}: {} entries, max rel error {:.3e}",
                r.name,
                r.checked,
                r.max_rel_error
            );
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            kinks += r.kinks;
        }
    }
    println!(
        "{checked} entries over {seeds} seeds ({kinks} at kinks): max relative error {worst:.3e} (tolerance {tolerance:.0e})"
    );
    Ok(worst <= tolerance)
}

fn run(cli: Cli) -> AnyResult<bool> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Train => train(&cfg)?,
        Command::Evaluate {
            checkpoint,
            sequences,
        } => evaluate_checkpoint(&cfg, &checkpoint, sequences)?,
        Command::GenTraffic => gen_traffic(&cfg, cli.common.out.as_deref())?,
        Command::DescribeModel { role } => describe(&cfg, role)?,
        Command::GradCheck { seeds, tolerance } => return grad_check(&cfg, seeds, tolerance),
        Command::RunExperiment => {
            let outcome = run_experiment(&cfg)?;
            print_summary(&outcome.summaries)?;
            eprintln!("artifacts in {}", outcome.out_dir.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
