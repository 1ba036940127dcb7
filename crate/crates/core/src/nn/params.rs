use rand::{Rng, RngCore};

use super::{NnError, Result};
use crate::tensor::{BatchStats, Checkpoint, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered, named parameters of one network. Non-trainable entries hold
/// running statistics; they travel with checkpoints and soft updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Tape handles for every parameter of a [`ParamSet`] bound on one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Deferred running-statistics update from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Total number of scalars, trainable or not.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Binds every entry as a constant, so no gradient reaches the parameters.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        Binding { vars }
    }

    /// Gradient for every trainable parameter (zeros where none flowed).
    pub fn gradients(&self, binding: &Binding, grads: &Gradients) -> Vec<Tensor> {
        self.trainable_ids()
            .into_iter()
            .map(|id| {
                grads
                    .get(binding.var(id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.get(id).shape()))
            })
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| &mut p.value)
            .collect()
    }

    pub fn apply_running(&mut self, updates: &[RunningUpdate]) {
        for u in updates {
            for (slot, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, b) in self.get_mut(slot).data_mut().iter_mut().zip(batch) {
                    *r = u.momentum * *r + (1.0 - u.momentum) * b;
                }
            }
        }
    }

    fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(NnError::Mismatch(format!(
                "{} parameters vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(NnError::Mismatch(format!(
                    "{} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self <- tau * online + (1 - tau) * self` over every entry.
    pub fn soft_update_from(&mut self, online: &ParamSet, tau: f64) -> Result<()> {
        self.check_compatible(online)?;
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            for (tv, ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                *tv = tau * ov + (1.0 - tau) * *tv;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), &p.value))
            .collect()
    }

    /// Overwrites every entry from `ckpt`, which must hold all names with
    /// matching shapes.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for p in &mut self.params {
            let name = format!("{prefix}{}", p.name);
            let t = ckpt
                .get(&name)
                .ok_or_else(|| NnError::Mismatch(format!("checkpoint lacks {name}")))?;
            if t.shape() != p.value.shape() {
                return Err(NnError::Mismatch(format!(
                    "{name}: checkpoint shape {:?}, network {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

/// Glorot-uniform initialization.
pub(crate) fn glorot(
    rng: &mut dyn RngCore,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, limit)
}

pub(crate) fn uniform(rng: &mut dyn RngCore, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
