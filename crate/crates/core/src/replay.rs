//! Circular prioritized replay with the hybrid TD-error / action-gradient
//! priority and `v^beta` sampling.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netenv::StateWindow;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("alpha must lie in (0,1), got {0}")]
    Alpha(f64),
    #[error("invalid replay setting: {0}")]
    Config(String),
    #[error("buffer holds {have} transitions, need {need}")]
    Insufficient { have: usize, need: usize },
    #[error("index {0} outside the buffer")]
    OutOfRange(usize),
    #[error("{indices} indices but {values} priority inputs")]
    LengthMismatch { indices: usize, values: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ReplayError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    /// Exponent for `(M p)^-w` importance weights; `None` disables them.
    #[serde(default)]
    pub importance_exponent: Option<f64>,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self {
            capacity: 2000,
            alpha: 0.6,
            beta: 0.6,
            eps: 0.01,
            importance_exponent: None,
        }
    }
}

impl PerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ReplayError::Alpha(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(ReplayError::Config(format!(
                "beta must lie in [0,1], got {}",
                self.beta
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(ReplayError::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.capacity == 0 {
            return Err(ReplayError::Config("capacity must be positive".into()));
        }
        Ok(())
    }
}

/// `alpha * (|td| + eps) + (1 - alpha) * grad_norm`.
pub fn priority(td_error: f64, q_grad_norm: f64, alpha: f64, eps: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ReplayError::Alpha(alpha));
    }
    if q_grad_norm.is_nan() || q_grad_norm < 0.0 {
        return Err(ReplayError::Config(format!(
            "gradient norm must be nonnegative, got {q_grad_norm}"
        )));
    }
    Ok(alpha * (td_error.abs() + eps) + (1.0 - alpha) * q_grad_norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: StateWindow,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next: StateWindow,
    pub done: bool,
}

/// Handle returned by [`PerBuffer::sample`]. The serial detects entries that
/// were overwritten before the priority update arrived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleIndex {
    pub slot: usize,
    pub serial: u64,
}

/// Binary sum tree over a power-of-two number of leaves. Internal nodes are
/// always recomputed from their children, so no drift accumulates.
#[derive(Clone, Debug)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn set(&mut self, slot: usize, value: f64) {
        let mut i = slot + self.leaves;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf whose cumulative range contains `u`, for `0 <= u < total`.
    fn find(&self, mut u: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = self.nodes[2 * i];
            // a zero right subtree can only be reached through rounding
            if u < left || self.nodes[2 * i + 1] == 0.0 {
                i *= 2;
            } else {
                u -= left;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }
}

#[derive(Clone, Debug)]
struct Entry {
    transition: Transition,
    priority: f64,
    serial: u64,
}

#[derive(Clone, Debug)]
pub struct PerBuffer {
    config: PerConfig,
    slots: Vec<Option<Entry>>,
    cursor: usize,
    len: usize,
    next_serial: u64,
    tree: SumTree,
}

impl PerBuffer {
    pub fn new(config: PerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            slots: vec![None; config.capacity],
            tree: SumTree::new(config.capacity),
            config,
            cursor: 0,
            len: 0,
            next_serial: 0,
        })
    }

    pub fn config(&self) -> &PerConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    /// Changes the sampling exponent and rebuilds the tree.
    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        PerConfig {
            beta,
            ..self.config.clone()
        }
        .validate()?;
        self.config.beta = beta;
        for slot in 0..self.slots.len() {
            let w = self.slots[slot]
                .as_ref()
                .map_or(0.0, |e| e.priority.powf(beta));
            self.tree.set(slot, w);
        }
        Ok(())
    }

    /// Largest resident priority, or `alpha * eps + 1` when empty.
    pub fn max_priority(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|e| e.priority)
            .reduce(f64::max)
            .unwrap_or(self.config.alpha * self.config.eps + 1.0)
    }

    /// Stores `t` at the current maximum priority, evicting the oldest entry when full.
    pub fn push(&mut self, t: Transition) -> SampleIndex {
        let priority = self.max_priority();
        let slot = self.cursor;
        let serial = self.next_serial;
        self.next_serial += 1;
        if self.slots[slot].is_none() {
            self.len += 1;
        }
        self.slots[slot] = Some(Entry {
            transition: t,
            priority,
            serial,
        });
        self.tree.set(slot, priority.powf(self.config.beta));
        self.cursor = (self.cursor + 1) % self.config.capacity;
        SampleIndex { slot, serial }
    }

    pub fn get(&self, index: SampleIndex) -> Option<&Transition> {
        self.resident(index).map(|e| &e.transition)
    }

    pub fn priority_of(&self, index: SampleIndex) -> Option<f64> {
        self.resident(index).map(|e| e.priority)
    }

    fn resident(&self, index: SampleIndex) -> Option<&Entry> {
        self.slots
            .get(index.slot)?
            .as_ref()
            .filter(|e| e.serial == index.serial)
    }

    /// Resident entries oldest first.
    pub fn indices(&self) -> Vec<SampleIndex> {
        let start = if self.len < self.config.capacity {
            0
        } else {
            self.cursor
        };
        (0..self.len)
            .map(|k| (start + k) % self.config.capacity)
            .map(|slot| {
                let e = self.slots[slot].as_ref().expect("resident slot");
                SampleIndex {
                    slot,
                    serial: e.serial,
                }
            })
            .collect()
    }

    /// `v^beta / sum v^beta` for each resident entry, oldest first.
    pub fn probabilities(&self) -> Result<Vec<(SampleIndex, f64)>> {
        if self.len == 0 {
            return Err(ReplayError::Insufficient { have: 0, need: 1 });
        }
        let idx = self.indices();
        let w: Vec<f64> = idx
            .iter()
            .map(|i| {
                self.slots[i.slot]
                    .as_ref()
                    .expect("resident")
                    .priority
                    .powf(self.config.beta)
            })
            .collect();
        let total: f64 = w.iter().sum();
        Ok(idx
            .into_iter()
            .zip(w)
            .map(|(i, w)| (i, w / total))
            .collect())
    }

    /// Draws `batch` indices with replacement in proportion to `v^beta`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<SampleIndex>> {
        if self.len < batch || self.len == 0 {
            return Err(ReplayError::Insufficient {
                have: self.len,
                need: batch.max(1),
            });
        }
        let total = self.tree.total();
        Ok((0..batch)
            .map(|_| {
                let slot = self.tree.find(rng.random::<f64>() * total);
                let e = self.slots[slot].as_ref().expect("sampled slot is resident");
                SampleIndex {
                    slot,
                    serial: e.serial,
                }
            })
            .collect())
    }

    /// Normalized importance weights for `indices`, or all ones when disabled.
    pub fn importance_weights(&self, indices: &[SampleIndex]) -> Vec<f64> {
        let Some(w) = self.config.importance_exponent else {
            return vec![1.0; indices.len()];
        };
        let total = self.tree.total();
        let m = self.len as f64;
        let raw: Vec<f64> = indices
            .iter()
            .map(|i| {
                let p = self
                    .resident(*i)
                    .map_or(0.0, |e| e.priority.powf(self.config.beta))
                    / total;
                if p > 0.0 {
                    (m * p).powf(-w)
                } else {
                    0.0
                }
            })
            .collect();
        let max = raw.iter().copied().fold(0.0, f64::max);
        raw.into_iter()
            .map(|r| if max > 0.0 { r / max } else { 1.0 })
            .collect()
    }

    /// Recomputes priorities of still-resident entries; overwritten ones are skipped.
    pub fn update_priorities(
        &mut self,
        indices: &[SampleIndex],
        td_errors: &[f64],
        q_grad_norms: &[f64],
    ) -> Result<()> {
        if td_errors.len() != indices.len() || q_grad_norms.len() != indices.len() {
            return Err(ReplayError::LengthMismatch {
                indices: indices.len(),
                values: td_errors.len().min(q_grad_norms.len()),
            });
        }
        if let Some(bad) = indices.iter().find(|i| i.slot >= self.config.capacity) {
            return Err(ReplayError::OutOfRange(bad.slot));
        }
        for ((idx, &td), &g) in indices.iter().zip(td_errors).zip(q_grad_norms) {
            let v = priority(td, g, self.config.alpha, self.config.eps)?;
            if !v.is_finite() {
                return Err(ReplayError::Config(format!(
                    "non-finite priority from td {td}, grad {g}"
                )));
            }
            let beta = self.config.beta;
            if let Some(e) = self.slots[idx.slot]
                .as_mut()
                .filter(|e| e.serial == idx.serial)
            {
                e.priority = v;
                self.tree.set(idx.slot, v.powf(beta));
            }
        }
        Ok(())
    }

    /// Diagnostic dump of `index,priority,reward`, oldest first.
    pub fn dump_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "priority", "reward"])?;
        for i in self.indices() {
            let e = self.slots[i.slot].as_ref().expect("resident");
            w.write_record([
                i.serial.to_string(),
                e.priority.to_string(),
                e.transition.reward.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use std::sync::Arc;

    fn dummy(reward: f64) -> Transition {
        let w = StateWindow::new(vec![Arc::new(Tensor::zeros(&[1, 2]))]).unwrap();
        Transition {
            state: w.clone(),
            action: vec![0.5],
            reward,
            next: w,
            done: false,
        }
    }

    fn config(capacity: usize, beta: f64) -> PerConfig {
        PerConfig {
            capacity,
            beta,
            ..PerConfig::default()
        }
    }

    #[test]
    fn priority_arithmetic() {
        assert!((priority(-2.0, 4.0, 0.5, 0.01).unwrap() - 3.005).abs() < 1e-15);
        assert_eq!(priority(0.0, 0.0, 0.6, 0.01).unwrap(), 0.6 * 0.01);
        assert_eq!(
            priority(1.5, 0.2, 0.3, 0.1).unwrap(),
            priority(-1.5, 0.2, 0.3, 0.1).unwrap()
        );
        assert!(matches!(
            priority(0.0, 0.0, 1.0, 0.01),
            Err(ReplayError::Alpha(_))
        ));
        assert!(matches!(
            priority(0.0, 0.0, 0.0, 0.01),
            Err(ReplayError::Alpha(_))
        ));
    }

    #[test]
    fn probabilities_beta_one() {
        let mut b = PerBuffer::new(config(4, 1.0)).unwrap();
        let i0 = b.push(dummy(0.0));
        let i1 = b.push(dummy(0.0));
        // v = alpha*eps + (1-alpha)*g; pick g so the two priorities are 1 and 3
        let a = 0.6;
        let g = |v: f64| (v - a * 0.01) / (1.0 - a);
        b.update_priorities(&[i0, i1], &[0.0, 0.0], &[g(1.0), g(3.0)])
            .unwrap();
        let p: Vec<f64> = b
            .probabilities()
            .unwrap()
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_is_uniform() {
        let mut b = PerBuffer::new(config(8, 0.0)).unwrap();
        let idx: Vec<_> = (0..5).map(|k| b.push(dummy(k as f64))).collect();
        b.update_priorities(&idx, &[0.1, 5.0, 0.0, 2.0, 9.0], &[0.0; 5])
            .unwrap();
        for (_, p) in b.probabilities().unwrap() {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_insufficient() {
        let mut b = PerBuffer::new(config(4, 0.6)).unwrap();
        assert!(b.probabilities().is_err());
        b.push(dummy(0.0));
        assert!(matches!(
            b.sample(2, &mut seeded(0)),
            Err(ReplayError::Insufficient { .. })
        ));
        let all = b.sample(1, &mut seeded(0)).unwrap();
        assert_eq!(all.len(), 1);
    }

    #[test]
    fn single_entry_fills_the_batch() {
        let mut b = PerBuffer::new(config(4, 0.6)).unwrap();
        let only = b.push(dummy(1.0));
        // sampling with replacement, so a batch larger than size still needs size >= batch
        let mut big = PerBuffer::new(config(64, 0.6)).unwrap();
        for _ in 0..32 {
            big.push(dummy(0.0));
        }
        assert_eq!(b.sample(1, &mut seeded(1)).unwrap(), vec![only]);
        assert_eq!(big.sample(32, &mut seeded(1)).unwrap().len(), 32);
    }

    #[test]
    fn new_entries_take_max_priority() {
        let mut b = PerBuffer::new(config(4, 0.6)).unwrap();
        let first = b.push(dummy(0.0));
        assert_eq!(b.priority_of(first), Some(0.6 * 0.01 + 1.0));
        b.update_priorities(&[first], &[3.0], &[0.0]).unwrap();
        let second = b.push(dummy(0.0));
        assert_eq!(b.priority_of(second), b.priority_of(first));
    }

    #[test]
    fn zero_update_gives_floor() {
        let mut b = PerBuffer::new(config(4, 0.6)).unwrap();
        let i = b.push(dummy(0.0));
        b.update_priorities(&[i], &[0.0], &[0.0]).unwrap();
        assert_eq!(b.priority_of(i), Some(0.6 * 0.01));
    }

    #[test]
    fn evicted_updates_are_skipped_and_bad_slots_rejected() {
        let mut b = PerBuffer::new(config(2, 0.6)).unwrap();
        let old = b.push(dummy(0.0));
        b.push(dummy(1.0));
        b.push(dummy(2.0));
        assert!(b.get(old).is_none());
        b.update_priorities(&[old], &[100.0], &[0.0]).unwrap();
        assert!(b
            .probabilities()
            .unwrap()
            .iter()
            .all(|(_, p)| (p - 0.5).abs() < 1e-12));
        let bad = SampleIndex { slot: 7, serial: 0 };
        assert!(matches!(
            b.update_priorities(&[bad], &[0.0], &[0.0]),
            Err(ReplayError::OutOfRange(7))
        ));
        assert!(b.update_priorities(&[old], &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn tree_find_matches_linear_scan() {
        let mut rng = seeded(3);
        let mut tree = SumTree::new(13);
        let mut values = [0.0; 13];
        for _ in 0..2000 {
            let slot = rng.random_range(0..13);
            let v = if rng.random::<f64>() < 0.2 {
                0.0
            } else {
                rng.random_range(0.0..5.0)
            };
            values[slot] = v;
            tree.set(slot, v);
            if tree.total() == 0.0 {
                continue;
            }
            let u = rng.random::<f64>() * tree.total();
            let mut acc = 0.0;
            let expected = values
                .iter()
                .position(|v| {
                    acc += v;
                    u < acc
                })
                .unwrap_or_else(|| values.iter().rposition(|v| *v > 0.0).unwrap());
            assert_eq!(tree.find(u), expected);
        }
    }

    #[test]
    fn dump_has_header() {
        let mut b = PerBuffer::new(config(3, 0.6)).unwrap();
        b.push(dummy(-1.5));
        let mut out = Vec::new();
        b.dump_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("index,priority,reward\n0,"));
        assert!(text.trim_end().ends_with("-1.5"));
    }

    #[test]
    fn importance_weights_default_off() {
        let mut b = PerBuffer::new(config(4, 0.6)).unwrap();
        let i = b.push(dummy(0.0));
        assert_eq!(b.importance_weights(&[i, i]), vec![1.0, 1.0]);
        let mut on = PerBuffer::new(PerConfig {
            importance_exponent: Some(0.4),
            ..config(4, 1.0)
        })
        .unwrap();
        let a = on.push(dummy(0.0));
        let c = on.push(dummy(0.0));
        on.update_priorities(&[a], &[5.0], &[0.0]).unwrap();
        let w = on.importance_weights(&[a, c]);
        assert!(w[0] < w[1] && w[1] == 1.0);
    }
}
