use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::agent::EpochMetrics;
use crate::stats::{summarize, Summary};

/// Reward samples in the order they were collected, with cached extremes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSeries {
    samples: Vec<f64>,
    min: f64,
    max: f64,
}

impl MetricsSeries {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(HarnessError::EmptySeries);
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(HarnessError::Config(format!(
                "reward series holds a non-finite value {bad}"
            )));
        }
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { samples, min, max })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }
}

/// Min-max scaling onto [0,1]. A constant series has no range and maps to
/// zeros.
pub fn normalize_rewards(series: &MetricsSeries) -> Vec<f64> {
    let range = series.max - series.min;
    if range <= 0.0 {
        log::warn!(
            "reward series of {} samples is constant at {}; normalized to zeros",
            series.samples.len(),
            series.min
        );
        return vec![0.0; series.samples.len()];
    }
    series
        .samples
        .iter()
        .map(|&r| {
            if r == series.max {
                1.0
            } else {
                ((r - series.min) / range).clamp(0.0, 1.0)
            }
        })
        .collect()
}

pub fn summarize_delays(per_sequence: &[f64]) -> Result<Summary> {
    Ok(summarize(per_sequence)?)
}

/// One row of the normalized-reward file. The `epoch_*` columns repeat the
/// epoch-level value on every step of that epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub epoch: usize,
    pub step: usize,
    pub reward: f64,
    pub normalized: f64,
    pub epoch_mean_reward: f64,
    pub epoch_normalized: f64,
}

pub fn reward_rows(metrics: &[EpochMetrics]) -> Result<Vec<RewardRow>> {
    let all: Vec<f64> = metrics
        .iter()
        .flat_map(|m| m.rewards.iter().copied())
        .collect();
    let per_step = normalize_rewards(&MetricsSeries::new(all)?);
    let means: Vec<f64> = metrics
        .iter()
        .map(|m| m.rewards.iter().sum::<f64>() / m.rewards.len().max(1) as f64)
        .collect();
    let per_epoch = normalize_rewards(&MetricsSeries::new(means.clone())?);
    let mut rows = Vec::with_capacity(per_step.len());
    let mut k = 0;
    for (e, m) in metrics.iter().enumerate() {
        for (step, &reward) in m.rewards.iter().enumerate() {
            rows.push(RewardRow {
                epoch: m.epoch,
                step,
                reward,
                normalized: per_step[k],
                epoch_mean_reward: means[e],
                epoch_normalized: per_epoch[e],
            });
            k += 1;
        }
    }
    Ok(rows)
}

/// One row of the delay summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelaySummaryRow {
    pub ilt: f64,
    pub epoch: usize,
    pub sequences: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl DelaySummaryRow {
    pub fn new(ilt: f64, epoch: usize, per_sequence: &[f64]) -> Result<Self> {
        let s = summarize_delays(per_sequence)?;
        Ok(Self {
            ilt,
            epoch,
            sequences: per_sequence.len(),
            min: s.min,
            q1: s.q1,
            median: s.median,
            q3: s.q3,
            max: s.max,
            mean: s.mean,
        })
    }
}

pub fn write_csv<T: Serialize>(writer: impl Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(reader: impl Read) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}
