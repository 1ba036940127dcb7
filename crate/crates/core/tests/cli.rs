use std::fs;
use std::process::{Command, Output};

use stdpg::harness::{read_csv, DelaySummaryRow, RewardRow};
use stdpg::netenv::{read_traffic_csv, Topology};

fn stdpg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stdpg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn describe_model_totals() {
    let out = stdpg(&["describe-model"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let total = text
        .lines()
        .last()
        .unwrap()
        .split_whitespace()
        .last()
        .unwrap();
    assert_eq!(total, "40165");
    let ffnn = stdout(&stdpg(&[
        "describe-model",
        "--backbone",
        "ffnn",
        "--role",
        "critic",
    ]));
    assert!(ffnn.contains("q value"));
}

#[test]
fn gen_traffic_is_deterministic_per_seed() {
    let a = stdpg(&["gen-traffic", "--ilt", "0.4", "--steps", "5", "--seed", "3"]);
    let b = stdpg(&["gen-traffic", "--ilt", "0.4", "--steps", "5", "--seed", "3"]);
    let c = stdpg(&["gen-traffic", "--ilt", "0.4", "--steps", "5", "--seed", "4"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let seq = read_traffic_csv(&a.stdout[..], 24).unwrap();
    assert_eq!(seq.len(), 5);
    let cap = Topology::geant2().total_capacity();
    for tm in &seq {
        assert!((tm.total() - 0.4 * cap).abs() < 1e-6 * cap);
    }
}

#[test]
fn gen_traffic_reads_environment_defaults() {
    let out = Command::new(env!("CARGO_BIN_EXE_stdpg"))
        .args(["gen-traffic"])
        .env("STDPG_STEPS", "2")
        .env("STDPG_SEED", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read_traffic_csv(&out.stdout[..], 24).unwrap().len(), 2);
}

#[test]
fn bad_input_exits_nonzero() {
    assert!(!stdpg(&["describe-model", "--no-such-flag"])
        .status
        .success());
    assert!(!stdpg(&["gen-traffic", "--ilt", "-1"]).status.success());
    assert!(!stdpg(&["describe-model", "--backbone", "transformer"])
        .status
        .success());
    let out = stdpg(&["evaluate", "--checkpoint", "/nonexistent/ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn grad_check_passes_for_one_seed() {
    let out = stdpg(&["grad-check", "--seeds", "1"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("max relative error"));
}

#[test]
fn experiment_then_evaluate_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let topo = Topology::from_edges(
        "square",
        4,
        &[
            (0, 1, 100.0, 1.0),
            (1, 2, 100.0, 1.0),
            (2, 3, 100.0, 1.0),
            (3, 0, 100.0, 1.0),
            (0, 2, 50.0, 2.0),
        ],
    )
    .unwrap();
    let topo_path = dir.path().join("square.json");
    fs::write(&topo_path, topo.to_json()).unwrap();
    let out_dir = dir.path().join("run");
    let config = serde_json::json!({
        "topology": topo_path,
        "ilts": [0.3],
        "epochs": [1, 2],
        "eval_sequences": 2,
        "agent": { "episode_len": 12, "batch": 4, "window": 2 },
        "out_dir": out_dir,
        "seed": 5
    });
    let config_path = dir.path().join("experiment.json");
    fs::write(&config_path, config.to_string()).unwrap();

    let out = stdpg(&["--config", config_path.to_str().unwrap(), "run-experiment"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let printed: Vec<DelaySummaryRow> = read_csv(&out.stdout[..]).unwrap();
    let written: Vec<DelaySummaryRow> =
        read_csv(fs::File::open(out_dir.join("delay_summary.csv")).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert_eq!(written.len(), 2);
    assert!(written
        .iter()
        .all(|r| r.sequences == 2 && r.min <= r.median && r.median <= r.max));

    let rewards: Vec<RewardRow> =
        read_csv(fs::File::open(out_dir.join("rewards_ilt-0.3.csv")).unwrap()).unwrap();
    assert_eq!(rewards.len(), 24);
    assert!(rewards.iter().all(|r| (0.0..=1.0).contains(&r.normalized)));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["topology"], "square");
    assert_eq!(
        manifest["runs"][0]["checkpoints"].as_array().unwrap().len(),
        2
    );

    let ckpt = out_dir.join("checkpoints/ilt-0.3/epoch-2");
    let eval = stdpg(&[
        "--config",
        config_path.to_str().unwrap(),
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sequences",
        "3",
    ]);
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let rows: Vec<DelaySummaryRow> = read_csv(&eval.stdout[..]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].sequences, 3);
}
