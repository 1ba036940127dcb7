//! Central finite differences against tape gradients, per layer type and for
//! the full actor and critic.

use rand::seq::index::sample;
use rand::{Rng, RngCore};
use serde::Serialize;

use super::Result;
use crate::nn::{
    Activation, Actor, Attention, BackboneKind, BatchNorm, Conv2d, Critic, Dense, Dropout, Forward,
    Lstm, MaxPool2d, Mode, NetConfig, ParamSet,
};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
    /// Entries sampled from each differentiated tensor.
    pub samples_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            samples_per_tensor: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorstEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<WorstEntry>,
    /// Entries judged against a one-sided difference because the step
    /// straddled a kink (a relu at zero or a max-pool tie).
    pub kinks: usize,
}

// Central-difference error that needs no explanation on smooth inputs.
const SMOOTH_ERROR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares gradients of a scalar built by `build` from `leaves`.
///
/// `build` receives a fresh tape and the current leaf values and returns
/// the loss plus one tape handle per leaf. It must be deterministic.
pub fn check<F>(
    name: &str,
    leaves: &[(String, Tensor)],
    config: &GradCheckConfig,
    rng: &mut dyn RngCore,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)>,
{
    let values: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, &values)?;
    let base = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&values)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, vals)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report = GradCheckReport {
        name: name.to_owned(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        kinks: 0,
    };
    let mut probe = values.clone();
    for (k, (label, t)) in leaves.iter().enumerate() {
        let n = t.len();
        let picks = sample(&mut *rng, n, config.samples_per_tensor.min(n));
        for i in picks.iter() {
            let x = t.data()[i];
            probe[k].data_mut()[i] = x + config.step;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x - config.step;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x;
            let mut numeric = (up - down) / (2.0 * config.step);
            let a = analytic[k].data()[i];
            let mut err = relative_error(a, numeric, config.floor);
            // Across a kink at distance d < step the central difference
            // misses the analytic slope by half the gap between the two
            // one-sided slopes; a wrong gradient leaves that gap near zero.
            let right = (up - base) / config.step;
            let left = (base - down) / config.step;
            if err > SMOOTH_ERROR && (right - left).abs() >= (a - numeric).abs() {
                // second-order one-sided stencils; one side is clear of the kink
                probe[k].data_mut()[i] = x + 2.0 * config.step;
                let up2 = eval(&probe)?;
                probe[k].data_mut()[i] = x - 2.0 * config.step;
                let down2 = eval(&probe)?;
                probe[k].data_mut()[i] = x;
                let right = (4.0 * up - up2 - 3.0 * base) / (2.0 * config.step);
                let left = (3.0 * base - 4.0 * down + down2) / (2.0 * config.step);
                let side = if (a - right).abs() < (a - left).abs() {
                    right
                } else {
                    left
                };
                let side_err = relative_error(a, side, config.floor);
                if side_err < err {
                    report.kinks += 1;
                    numeric = side;
                    err = side_err;
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstEntry {
                    tensor: label.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn random(rng: &mut dyn RngCore, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

fn trainable_leaves(params: &ParamSet) -> Vec<(String, Tensor)> {
    params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

fn with_values(params: &ParamSet, values: &[Tensor]) -> ParamSet {
    let mut out = params.clone();
    for (id, v) in out.trainable_ids().into_iter().zip(values) {
        *out.get_mut(id) = v.clone();
    }
    out
}

// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod)?)
}

/// Single-layer checks on small random shapes.
pub fn layer_suite(seed: u64, config: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = seeded(seed);
    let mut reports = Vec::new();

    for act in [
        Activation::Identity,
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
    ] {
        let mut params = ParamSet::new();
        let layer = Dense::new(&mut params, "dense", 5, 4, act, &mut rng);
        let x = random(&mut rng, &[3, 5], -1.0, 1.0);
        let out_w = random(&mut rng, &[3, 4], -1.0, 1.0);
        let mut leaves = trainable_leaves(&params);
        leaves.push(("input".into(), x));
        reports.push(check(
            &format!("dense {act:?}"),
            &leaves,
            config,
            &mut rng,
            |tape, vals| {
                let p = with_values(&params, vals);
                let b = p.bind(tape);
                let x = tape.leaf(vals[2].clone());
                let mut f = Forward::eval(tape);
                let y = layer.forward(&mut f, &b, x)?;
                let vars = vec![b.var(layer.weight), b.var(layer.bias), x];
                Ok((weighted_sum(tape, y, &out_w)?, vars))
            },
        )?);
    }

    {
        let mut params = ParamSet::new();
        let conv = Conv2d::new(&mut params, "conv", 2, 3, (2, 2), &mut rng);
        let x = random(&mut rng, &[2, 2, 4, 5], -1.0, 1.0);
        let out_w = random(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
        let mut leaves = trainable_leaves(&params);
        leaves.push(("input".into(), x));
        reports.push(check("conv2d", &leaves, config, &mut rng, |tape, vals| {
            let p = with_values(&params, vals);
            let b = p.bind(tape);
            let x = tape.leaf(vals[2].clone());
            let mut f = Forward::eval(tape);
            let y = conv.forward(&mut f, &b, x)?;
            Ok((
                weighted_sum(tape, y, &out_w)?,
                vec![b.var(conv.kernel), b.var(conv.bias), x],
            ))
        })?);
    }

    for mode in [Mode::Train, Mode::Eval] {
        let mut params = ParamSet::new();
        let bn = BatchNorm::new(&mut params, "bn", 3);
        for id in params.trainable_ids() {
            *params.get_mut(id) = random(&mut rng, &[3], 0.5, 1.5);
        }
        *params.get_mut(bn.running_mean) = random(&mut rng, &[3], -0.5, 0.5);
        *params.get_mut(bn.running_var) = random(&mut rng, &[3], 0.5, 2.0);
        let x = random(&mut rng, &[4, 3, 2, 3], -2.0, 2.0);
        let out_w = random(&mut rng, &[4, 3, 2, 3], -1.0, 1.0);
        let mut leaves = trainable_leaves(&params);
        leaves.push(("input".into(), x));
        reports.push(check(
            &format!("batch norm {mode:?}"),
            &leaves,
            config,
            &mut rng,
            |tape, vals| {
                let p = with_values(&params, vals);
                let b = p.bind(tape);
                let x = tape.leaf(vals[2].clone());
                let mut f = Forward::eval(tape);
                f.set_mode(mode);
                let y = bn.forward(&mut f, &b, &p, x)?;
                Ok((
                    weighted_sum(tape, y, &out_w)?,
                    vec![b.var(bn.gamma), b.var(bn.beta), x],
                ))
            },
        )?);
    }

    {
        let pool = MaxPool2d {
            pool: (2, 2),
            stride: (2, 2),
        };
        // distinct values keep every window away from ties
        let mut x = random(&mut rng, &[2, 2, 4, 5], -1.0, 1.0);
        let n = x.len();
        for (k, v) in x.data_mut().iter_mut().enumerate() {
            *v = (*v * 0.1) + k as f64 / n as f64;
        }
        let out_w = random(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
        reports.push(check(
            "max pool",
            &[("input".into(), x)],
            config,
            &mut rng,
            |tape, vals| {
                let x = tape.leaf(vals[0].clone());
                let mut f = Forward::eval(tape);
                let y = pool.forward(&mut f, x)?;
                Ok((weighted_sum(tape, y, &out_w)?, vec![x]))
            },
        )?);
    }

    {
        let drop = Dropout::new(0.5)?;
        let x = random(&mut rng, &[3, 8], -1.0, 1.0);
        let out_w = random(&mut rng, &[3, 8], -1.0, 1.0);
        let mask_seed = rng.random();
        reports.push(check(
            "dropout",
            &[("input".into(), x)],
            config,
            &mut rng,
            |tape, vals| {
                let x = tape.leaf(vals[0].clone());
                let mut mask_rng = seeded(mask_seed);
                let mut f = Forward::train(tape, &mut mask_rng);
                let y = drop.forward(&mut f, x)?;
                Ok((weighted_sum(tape, y, &out_w)?, vec![x]))
            },
        )?);
    }

    {
        let x = random(&mut rng, &[2, 3, 2, 3], -1.0, 1.0);
        let out_w = random(&mut rng, &[2, 3], -1.0, 1.0);
        reports.push(check(
            "spatial mean",
            &[("input".into(), x)],
            config,
            &mut rng,
            |tape, vals| {
                let x = tape.leaf(vals[0].clone());
                let y = tape.spatial_mean(x)?;
                Ok((weighted_sum(tape, y, &out_w)?, vec![x]))
            },
        )?);
    }

    {
        let mut params = ParamSet::new();
        let lstm = Lstm::new(&mut params, "lstm", 3, 4, &mut rng);
        let x = random(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let out_w = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let mut leaves = trainable_leaves(&params);
        leaves.push(("input".into(), x));
        reports.push(check("lstm", &leaves, config, &mut rng, |tape, vals| {
            let p = with_values(&params, vals);
            let b = p.bind(tape);
            let x = tape.leaf(vals[3].clone());
            let mut f = Forward::eval(tape);
            let y = lstm.forward(&mut f, &b, x)?;
            let mut vars: Vec<Var> = p.trainable_ids().into_iter().map(|id| b.var(id)).collect();
            vars.push(x);
            Ok((weighted_sum(tape, y, &out_w)?, vars))
        })?);
    }

    for trainable in [false, true] {
        let mut params = ParamSet::new();
        let att = if trainable {
            Attention::trainable(&mut params, "att", 4, 3, 2, &mut rng)
        } else {
            Attention::identity(4)
        };
        let x = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let d_out = if trainable { 2 } else { 4 };
        let out_w = random(&mut rng, &[2, d_out], -1.0, 1.0);
        let mut leaves = trainable_leaves(&params);
        leaves.push(("input".into(), x));
        let name = if trainable {
            "attention trainable"
        } else {
            "attention identity"
        };
        reports.push(check(name, &leaves, config, &mut rng, |tape, vals| {
            let k = vals.len() - 1;
            let p = with_values(&params, &vals[..k]);
            let b = p.bind(tape);
            let x = tape.leaf(vals[k].clone());
            let mut f = Forward::eval(tape);
            let y = att.forward(&mut f, &b, x)?;
            let mut vars: Vec<Var> = p.trainable_ids().into_iter().map(|id| b.var(id)).collect();
            vars.push(x);
            Ok((weighted_sum(tape, y, &out_w)?, vars))
        })?);
    }

    {
        let x = random(&mut rng, &[3, 5], -3.0, 3.0);
        let out_w = random(&mut rng, &[3, 5], -1.0, 1.0);
        reports.push(check(
            "softmax rows",
            &[("input".into(), x)],
            config,
            &mut rng,
            |tape, vals| {
                let x = tape.leaf(vals[0].clone());
                let y = tape.softmax_rows(x)?;
                Ok((weighted_sum(tape, y, &out_w)?, vec![x]))
            },
        )?);
    }

    Ok(reports)
}

/// Full actor and critic in training mode (fixed dropout mask) on the
/// GEANT2-sized shapes, loss = sum of outputs.
pub fn network_suite(
    seed: u64,
    kind: BackboneKind,
    config: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>> {
    let mut rng = seeded(seed);
    let net = NetConfig::geant2(kind, 4);
    let batch = 2;
    let states = random(&mut rng, &[batch, 4, 23, 24], 0.0, 2.0);
    let actions = random(&mut rng, &[batch, 37], 0.05, 0.95);
    let mask_seed = derive_seed(seed, 77);
    let mut reports = Vec::new();

    let actor = Actor::new(net.clone(), &mut rng)?;
    let mut leaves = trainable_leaves(actor.params());
    leaves.push(("states".into(), states.clone()));
    reports.push(check(
        &format!("{kind} actor"),
        &leaves,
        config,
        &mut rng,
        |tape, vals| {
            let k = vals.len() - 1;
            let mut a = actor.clone();
            *a.params_mut() = with_values(actor.params(), &vals[..k]);
            let s = tape.leaf(vals[k].clone());
            let mut mask_rng = seeded(mask_seed);
            let mut f = Forward::train(tape, &mut mask_rng);
            let pass = a.forward(&mut f, s)?;
            let mut vars: Vec<Var> = a
                .params()
                .trainable_ids()
                .into_iter()
                .map(|id| pass.binding.var(id))
                .collect();
            vars.push(s);
            Ok((tape.sum(pass.output)?, vars))
        },
    )?);

    let critic = Critic::new(net, &mut rng)?;
    let mut leaves = trainable_leaves(critic.params());
    leaves.push(("states".into(), states));
    leaves.push(("actions".into(), actions));
    reports.push(check(
        &format!("{kind} critic"),
        &leaves,
        config,
        &mut rng,
        |tape, vals| {
            let k = vals.len() - 2;
            let mut c = critic.clone();
            *c.params_mut() = with_values(critic.params(), &vals[..k]);
            let s = tape.leaf(vals[k].clone());
            let a = tape.leaf(vals[k + 1].clone());
            let mut mask_rng = seeded(mask_seed);
            let mut f = Forward::train(tape, &mut mask_rng);
            let pass = c.forward(&mut f, s, a)?;
            let mut vars: Vec<Var> = c
                .params()
                .trainable_ids()
                .into_iter()
                .map(|id| pass.binding.var(id))
                .collect();
            vars.push(s);
            vars.push(a);
            Ok((tape.sum(pass.output)?, vars))
        },
    )?);
    Ok(reports)
}
