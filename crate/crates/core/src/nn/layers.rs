use rand::{Rng, RngCore};

use super::params::{glorot, uniform, Binding, ParamId, ParamSet, RunningUpdate};
use super::{NnError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State threaded through one forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub mode: Mode,
    rng: Option<&'a mut dyn RngCore>,
    running: Vec<RunningUpdate>,
}

impl<'a> Forward<'a> {
    pub fn eval(tape: &'a mut Tape) -> Self {
        Self {
            tape,
            mode: Mode::Eval,
            rng: None,
            running: Vec::new(),
        }
    }

    /// Training mode; `rng` drives dropout masks.
    pub fn train(tape: &'a mut Tape, rng: &'a mut dyn RngCore) -> Self {
        Self {
            tape,
            mode: Mode::Train,
            rng: Some(rng),
            running: Vec::new(),
        }
    }

    /// Switches mode for subsequent layers, keeping tape, rng and pending
    /// running-statistics updates.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Pending running-statistics updates recorded since the last call.
    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate> {
        std::mem::take(&mut self.running)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Self::Identity => x,
            Self::Relu => tape.relu(x)?,
            Self::Sigmoid => tape.sigmoid(x)?,
            Self::Tanh => tape.tanh(x)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            glorot(rng, &[inputs, outputs], inputs, outputs),
            true,
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true);
        Self {
            weight,
            bias,
            inputs,
            outputs,
            activation,
        }
    }

    /// Like [`Dense::new`] but with weights drawn from `±limit`, used for
    /// output heads that should start near zero.
    pub fn new_small(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        limit: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            uniform(rng, &[inputs, outputs], limit),
            true,
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true);
        Self {
            weight,
            bias,
            inputs,
            outputs,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    /// `x` is `[B, inputs]`.
    pub fn forward(&self, f: &mut Forward, b: &Binding, x: Var) -> Result<Var> {
        let y = f.tape.matmul(x, b.var(self.weight))?;
        let y = f.tape.add_bias(y, b.var(self.bias))?;
        self.activation.apply(f.tape, y)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub filters: usize,
    pub channels: usize,
    pub kernel_size: (usize, usize),
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        filters: usize,
        kernel_size: (usize, usize),
        rng: &mut dyn RngCore,
    ) -> Self {
        let (kh, kw) = kernel_size;
        let fan_in = channels * kh * kw;
        let fan_out = filters * kh * kw;
        let kernel = params.add(
            format!("{name}.kernel"),
            glorot(rng, &[filters, channels, kh, kw], fan_in, fan_out),
            true,
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[filters]), true);
        Self {
            kernel,
            bias,
            filters,
            channels,
            kernel_size,
        }
    }

    pub fn param_count(&self) -> usize {
        self.filters * self.channels * self.kernel_size.0 * self.kernel_size.1 + self.filters
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size;
        if h < kh || w < kw {
            return Err(NnError::Shape(format!(
                "conv2d input {h}x{w} smaller than kernel {kh}x{kw}"
            )));
        }
        Ok((h - kh + 1, w - kw + 1))
    }

    /// `[B,C,H,W] -> [B,F,H-KH+1,W-KW+1]`.
    pub fn forward(&self, f: &mut Forward, b: &Binding, x: Var) -> Result<Var> {
        Ok(f.tape.conv2d(x, b.var(self.kernel), b.var(self.bias))?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], 1.0),
                true,
            ),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: params.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: params.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                false,
            ),
            channels,
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    /// Trainable scale/shift plus running mean/variance.
    pub fn param_count(&self) -> usize {
        4 * self.channels
    }

    pub fn forward(&self, f: &mut Forward, b: &Binding, params: &ParamSet, x: Var) -> Result<Var> {
        let (gamma, beta) = (b.var(self.gamma), b.var(self.beta));
        match f.mode {
            Mode::Train => {
                let (y, stats) = f.tape.batch_norm(x, gamma, beta, None, self.eps)?;
                if let Some(stats) = stats {
                    f.running.push(RunningUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        momentum: self.momentum,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = params.get(self.running_mean).data();
                let var = params.get(self.running_var).data();
                Ok(f.tape
                    .batch_norm(x, gamma, beta, Some((mean, var)), self.eps)?
                    .0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub pool: (usize, usize),
    pub stride: (usize, usize),
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ((ph, pw), (sh, sw)) = (self.pool, self.stride);
        if h < ph || w < pw {
            return Err(NnError::Shape(format!(
                "max-pool input {h}x{w} smaller than pool {ph}x{pw}"
            )));
        }
        Ok(((h - ph) / sh + 1, (w - pw) / sw + 1))
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        Ok(f.tape.max_pool2d(x, self.pool, self.stride)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Config(format!(
                "dropout rate {rate} outside [0,1)"
            )));
        }
        Ok(Self { rate })
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        if f.mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let rng = f
            .rng
            .as_deref_mut()
            .ok_or_else(|| NnError::Config("training-mode dropout needs an rng".into()))?;
        let shape = f.tape.value(x).shape().to_vec();
        let keep = 1.0 - self.rate;
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = f.tape.constant(Tensor::new(shape, mask)?);
        Ok(f.tape.mul(x, mask)?)
    }
}

/// Single-layer LSTM, gate order input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input_weight: ParamId,
    pub recurrent_weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let g = 4 * hidden;
        let input_weight = params.add(
            format!("{name}.input_weight"),
            glorot(rng, &[inputs, g], inputs, g),
            true,
        );
        let recurrent_weight = params.add(
            format!("{name}.recurrent_weight"),
            glorot(rng, &[hidden, g], hidden, g),
            true,
        );
        let mut b = Tensor::zeros(&[g]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = params.add(format!("{name}.bias"), b, true);
        Self {
            input_weight,
            recurrent_weight,
            bias,
            inputs,
            hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        4 * (self.inputs * self.hidden + self.hidden * self.hidden + self.hidden)
    }

    /// `seq` is `[B,T,inputs]`; returns every hidden state as `[B,T,hidden]`,
    /// starting from zero hidden and cell states.
    pub fn forward(&self, f: &mut Forward, b: &Binding, seq: Var) -> Result<Var> {
        let shape = f.tape.value(seq).shape().to_vec();
        if shape.len() != 3 || shape[1] == 0 || shape[2] != self.inputs {
            return Err(NnError::Shape(format!(
                "lstm expects [B,T>0,{}] input, got {shape:?}",
                self.inputs
            )));
        }
        let (batch, steps, h) = (shape[0], shape[1], self.hidden);
        let (w, r, bias) = (
            b.var(self.input_weight),
            b.var(self.recurrent_weight),
            b.var(self.bias),
        );
        let tape = &mut *f.tape;
        let mut hs = tape.constant(Tensor::zeros(&[batch, h]));
        let mut cs = tape.constant(Tensor::zeros(&[batch, h]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = tape.slice(seq, 1, t, t + 1)?;
            let xt = tape.reshape(xt, &[batch, self.inputs])?;
            let zx = tape.matmul(xt, w)?;
            let zh = tape.matmul(hs, r)?;
            let z = tape.add(zx, zh)?;
            let z = tape.add_bias(z, bias)?;
            let i = tape.slice(z, 1, 0, h)?;
            let i = tape.sigmoid(i)?;
            let fg = tape.slice(z, 1, h, 2 * h)?;
            let fg = tape.sigmoid(fg)?;
            let g = tape.slice(z, 1, 2 * h, 3 * h)?;
            let g = tape.tanh(g)?;
            let o = tape.slice(z, 1, 3 * h, 4 * h)?;
            let o = tape.sigmoid(o)?;
            let keep = tape.mul(fg, cs)?;
            let write = tape.mul(i, g)?;
            cs = tape.add(keep, write)?;
            let squashed = tape.tanh(cs)?;
            hs = tape.mul(o, squashed)?;
            outputs.push(tape.reshape(hs, &[batch, 1, h])?);
        }
        Ok(tape.concat(&outputs, 1)?)
    }
}

/// Scaled dot-product attention over a sequence of hidden states.
///
/// Projections default to fixed identities (no parameters); with
/// `trainable` they are learned matrices.
#[derive(Clone, Debug)]
pub struct Attention {
    pub d_model: usize,
    pub d_key: usize,
    pub d_value: usize,
    projections: Option<[ParamId; 3]>,
}

impl Attention {
    pub fn identity(d_model: usize) -> Self {
        Self {
            d_model,
            d_key: d_model,
            d_value: d_model,
            projections: None,
        }
    }

    pub fn trainable(
        params: &mut ParamSet,
        name: &str,
        d_model: usize,
        d_key: usize,
        d_value: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let mut mk = |suffix: &str, cols: usize| {
            params.add(
                format!("{name}.{suffix}"),
                glorot(rng, &[d_model, cols], d_model, cols),
                true,
            )
        };
        let projections = Some([mk("query", d_key), mk("key", d_key), mk("value", d_value)]);
        Self {
            d_model,
            d_key,
            d_value,
            projections,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.projections {
            Some(_) => self.d_model * (2 * self.d_key + self.d_value),
            None => 0,
        }
    }

    fn projection_vars(&self, f: &mut Forward, b: &Binding) -> [Var; 3] {
        match self.projections {
            Some([q, k, v]) => [b.var(q), b.var(k), b.var(v)],
            None => {
                let eye = f.tape.constant(Tensor::eye(self.d_model));
                [eye, eye, eye]
            }
        }
    }

    /// One sequence `[T, d_model]` to `(weights [T,T], context [T,d_value])`.
    pub fn attend(&self, f: &mut Forward, b: &Binding, hs: Var) -> Result<(Var, Var)> {
        let [wq, wk, wv] = self.projection_vars(f, b);
        self.attend_with(f.tape, hs, [wq, wk, wv])
    }

    fn attend_with(&self, tape: &mut Tape, hs: Var, [wq, wk, wv]: [Var; 3]) -> Result<(Var, Var)> {
        let s = tape.value(hs).shape();
        if s.len() != 2 || s[0] == 0 || s[1] != self.d_model {
            return Err(NnError::Shape(format!(
                "attention expects [T>0,{}] input, got {s:?}",
                self.d_model
            )));
        }
        let queries = tape.matmul(hs, wq)?;
        let keys = tape.matmul(hs, wk)?;
        let values = tape.matmul(hs, wv)?;
        let keys_t = tape.transpose(keys)?;
        let scores = tape.matmul(queries, keys_t)?;
        let scores = tape.scale(scores, 1.0 / (self.d_key as f64).sqrt())?;
        let weights = tape.softmax_rows(scores)?;
        let context = tape.matmul(weights, values)?;
        Ok((weights, context))
    }

    /// `[B,T,d_model] -> [B,d_value]`: the last context row of each sequence.
    pub fn forward(&self, f: &mut Forward, b: &Binding, seq: Var) -> Result<Var> {
        let shape = f.tape.value(seq).shape().to_vec();
        if shape.len() != 3 {
            return Err(NnError::Shape(format!(
                "attention expects [B,T,D], got {shape:?}"
            )));
        }
        let (batch, steps) = (shape[0], shape[1]);
        let proj = self.projection_vars(f, b);
        let mut rows = Vec::with_capacity(batch);
        for i in 0..batch {
            let hs = f.tape.slice(seq, 0, i, i + 1)?;
            let hs = f.tape.reshape(hs, &[steps, self.d_model])?;
            let (_, context) = self.attend_with(f.tape, hs, proj)?;
            rows.push(f.tape.slice(context, 0, steps - 1, steps)?);
        }
        Ok(f.tape.concat(&rows, 0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        uniform(rng, shape, 1.0)
    }

    #[test]
    fn conv_output_matches_table_shape() {
        let mut ps = ParamSet::new();
        let conv = Conv2d::new(&mut ps, "c", 1, 64, (2, 2), &mut rng());
        assert_eq!(conv.output_hw(23, 24).unwrap(), (22, 23));
        assert_eq!(conv.param_count(), 320);
        assert_eq!(ps.count(), 320);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 1, 23, 24]));
        let mut f = Forward::eval(&mut tape);
        let y = conv.forward(&mut f, &b, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 64, 22, 23]);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut ps = ParamSet::new();
        let conv = Conv2d::new(&mut ps, "c", 1, 3, (2, 2), &mut rng());
        ps.get_mut(conv.bias)
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let mut f = Forward::eval(&mut tape);
        let y = conv.forward(&mut f, &b, x).unwrap();
        let v = tape.value(y).data();
        assert!(v[..4].iter().all(|&x| x == 0.5));
        assert!(v[4..8].iter().all(|&x| x == -1.0));
        assert!(v[8..].iter().all(|&x| x == 2.0));
    }

    #[test]
    fn conv_local_sums() {
        let mut ps = ParamSet::new();
        let conv = Conv2d::new(&mut ps, "c", 1, 1, (2, 2), &mut rng());
        ps.get_mut(conv.kernel).data_mut().fill(1.0);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let input: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 3], input).unwrap());
        let mut f = Forward::eval(&mut tape);
        let y = conv.forward(&mut f, &b, x).unwrap();
        // [[1,2,3],[4,5,6],[7,8,9]]: windows sum to 12, 16, 24, 28
        assert_eq!(tape.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_rejects_small_input() {
        let mut ps = ParamSet::new();
        let conv = Conv2d::new(&mut ps, "c", 1, 1, (2, 2), &mut rng());
        assert!(conv.output_hw(1, 5).is_err());
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 5]));
        let mut f = Forward::eval(&mut tape);
        assert!(conv.forward(&mut f, &b, x).is_err());
    }

    #[test]
    fn pool_shapes_and_values() {
        let pool = MaxPool2d {
            pool: (2, 2),
            stride: (2, 2),
        };
        assert_eq!(pool.output_hw(22, 23).unwrap(), (11, 11));
        assert!(pool.output_hw(1, 4).is_err());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut f = Forward::eval(&mut tape);
        let y = pool.forward(&mut f, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.constant(Tensor::full(&[1, 2, 4, 5], 1.5));
        let mut f = Forward::eval(&mut tape);
        let y = pool.forward(&mut f, c).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
    }

    fn bn_setup(gamma: f64) -> (ParamSet, BatchNorm) {
        let mut ps = ParamSet::new();
        let bn = BatchNorm::new(&mut ps, "bn", 3);
        ps.get_mut(bn.gamma).data_mut().fill(gamma);
        ps.get_mut(bn.beta)
            .data_mut()
            .copy_from_slice(&[0.25, -0.5, 1.0]);
        (ps, bn)
    }

    /// Per-channel mean and population variance by direct summation.
    fn channel_moments(t: &Tensor) -> Vec<(f64, f64)> {
        let s = t.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..b)
                    .flat_map(|bi| t.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].to_vec())
                    .collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (mean, var)
            })
            .collect()
    }

    #[test]
    fn batchnorm_train_mode_standardizes() {
        let (mut ps, bn) = bn_setup(1.0);
        ps.get_mut(bn.beta).data_mut().fill(0.0);
        let mut r = rng();
        let x = random(&mut r, &[5, 3, 4, 3]).map(|v| 3.0 * v + 7.0);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let xv = tape.constant(x);
        let mut f = Forward::train(&mut tape, &mut r);
        let y = bn.forward(&mut f, &b, &ps, xv).unwrap();
        let updates = f.take_running_updates();
        assert_eq!(updates.len(), 1);
        for (mean, var) in channel_moments(tape.value(y)) {
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn batchnorm_identity_on_standard_batch() {
        let (mut ps, bn) = bn_setup(1.0);
        ps.get_mut(bn.beta).data_mut().fill(0.0);
        // each channel holds [-1, 1] across the batch: mean 0, variance 1
        let x = Tensor::new(vec![2, 3, 1, 1], vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut r = rng();
        let mut f = Forward::train(&mut tape, &mut r);
        let y = bn.forward(&mut f, &b, &ps, xv).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - e).abs() <= 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn batchnorm_zero_gamma_outputs_beta() {
        let (ps, bn) = bn_setup(0.0);
        let mut r = rng();
        let x = random(&mut r, &[2, 3, 2, 2]);
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let b = ps.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let mut f = Forward::train(&mut tape, &mut r);
            f.set_mode(mode);
            let y = bn.forward(&mut f, &b, &ps, xv).unwrap();
            let out = tape.value(y).data();
            for (i, v) in out.iter().enumerate() {
                let ch = (i / 4) % 3;
                assert_eq!(*v, [0.25, -0.5, 1.0][ch]);
            }
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_finite() {
        let (ps, bn) = bn_setup(1.0);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let xv = tape.constant(Tensor::full(&[4, 3, 2, 2], 5.0));
        let mut r = rng();
        let mut f = Forward::train(&mut tape, &mut r);
        let y = bn.forward(&mut f, &b, &ps, xv).unwrap();
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn batchnorm_running_stats_update() {
        let (mut ps, bn) = bn_setup(1.0);
        let x = Tensor::new(vec![2, 3, 1, 1], vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0]).unwrap();
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let xv = tape.constant(x);
        let mut r = rng();
        let mut f = Forward::train(&mut tape, &mut r);
        bn.forward(&mut f, &b, &ps, xv).unwrap();
        let updates = f.take_running_updates();
        ps.apply_running(&updates);
        let m = bn.momentum;
        assert_eq!(
            ps.get(bn.running_mean).data(),
            &[(1.0 - m) * 2.0, (1.0 - m) * 3.0, (1.0 - m) * 4.0]
        );
        assert_eq!(ps.get(bn.running_var).data()[0], m + (1.0 - m) * 1.0);
    }

    #[test]
    fn dropout_modes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[10], 2.0));
        let d = Dropout::new(0.5).unwrap();
        let mut f = Forward::eval(&mut tape);
        assert_eq!(d.forward(&mut f, x).unwrap(), x);
        let mut r = rng();
        let mut f = Forward::train(&mut tape, &mut r);
        assert_eq!(Dropout::new(0.0).unwrap().forward(&mut f, x).unwrap(), x);
        let y = d.forward(&mut f, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 4.0));
        assert!(Dropout::new(1.0).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let n = 1_000_000;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[n], 1.0));
        let mut r = ChaCha8Rng::seed_from_u64(2024);
        let mut f = Forward::train(&mut tape, &mut r);
        let y = Dropout::new(0.5).unwrap().forward(&mut f, x).unwrap();
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        // binomial sd = 0.0005, so 0.002 is a four-sigma band
        assert!((kept - 0.5).abs() <= 0.002, "{kept}");
    }

    fn sigm(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn lstm_single_step_matches_gate_equations() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let (d, h) = (3, 2);
        let lstm = Lstm::new(&mut ps, "l", d, h, &mut r);
        let x = random(&mut r, &[1, 1, d]);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut f = Forward::eval(&mut tape);
        let out = lstm.forward(&mut f, &b, xv).unwrap();
        let got = tape.value(out).data().to_vec();

        let w = ps.get(lstm.input_weight).data();
        let bias = ps.get(lstm.bias).data();
        let z = |col: usize| {
            (0..d)
                .map(|k| x.data()[k] * w[k * 4 * h + col])
                .sum::<f64>()
                + bias[col]
        };
        #[allow(clippy::needless_range_loop)]
        for j in 0..h {
            let i = sigm(z(j));
            let g = z(2 * h + j).tanh();
            let o = sigm(z(3 * h + j));
            // c0 = 0 so the forget gate drops out
            let c = i * g;
            let expected = o * c.tanh();
            assert!((got[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn lstm_zero_weights_zero_input() {
        let mut ps = ParamSet::new();
        let lstm = Lstm::new(&mut ps, "l", 4, 3, &mut rng());
        for id in ps.trainable_ids() {
            ps.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 5, 4]));
        let mut f = Forward::eval(&mut tape);
        let out = lstm.forward(&mut f, &b, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_rejects_wrong_width() {
        let mut ps = ParamSet::new();
        let lstm = Lstm::new(&mut ps, "l", 64, 64, &mut rng());
        assert_eq!(lstm.param_count(), 33024);
        assert_eq!(ps.count(), 33024);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 3, 32]));
        let mut f = Forward::eval(&mut tape);
        assert!(lstm.forward(&mut f, &b, x).is_err());
    }

    #[test]
    fn attention_single_step_returns_value_row() {
        let att = Attention::identity(4);
        let mut tape = Tape::new();
        let ps = ParamSet::new();
        let b = ps.bind(&mut tape);
        let h = Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let hv = tape.constant(h.clone());
        let mut f = Forward::eval(&mut tape);
        let (w, c) = att.attend(&mut f, &b, hv).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(c).data(), h.data());
    }

    #[test]
    fn attention_identical_rows_are_uniform() {
        let att = Attention::identity(3);
        let mut tape = Tape::new();
        let ps = ParamSet::new();
        let b = ps.bind(&mut tape);
        let hv = tape.constant(Tensor::from_rows(&vec![vec![0.5, -0.2, 0.9]; 5]).unwrap());
        let mut f = Forward::eval(&mut tape);
        let (w, _) = att.attend(&mut f, &b, hv).unwrap();
        for v in tape.value(w).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_two_step_hand_oracle() {
        let mut ps = ParamSet::new();
        let att = Attention::trainable(&mut ps, "a", 2, 2, 2, &mut rng());
        let [q, k, v] = att.projections.unwrap();
        let wq = [[1.0, 0.5], [0.0, -1.0]];
        let wk = [[0.2, 0.0], [1.0, 1.0]];
        let wv = [[2.0, 1.0], [-1.0, 0.5]];
        for (id, m) in [(q, wq), (k, wk), (v, wv)] {
            ps.get_mut(id)
                .data_mut()
                .copy_from_slice(&[m[0][0], m[0][1], m[1][0], m[1][1]]);
        }
        let hrows = [[1.0, 2.0], [-0.5, 0.25]];

        // step-by-step evaluation with plain arrays
        let proj = |w: [[f64; 2]; 2]| {
            hrows.map(|r| {
                [
                    r[0] * w[0][0] + r[1] * w[1][0],
                    r[0] * w[0][1] + r[1] * w[1][1],
                ]
            })
        };
        let (u, e, val) = (proj(wq), proj(wk), proj(wv));
        let mut expected = [[0.0; 2]; 2];
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (u[i][0] * e[j][0] + u[i][1] * e[j][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            let a: Vec<f64> = s.iter().map(|x| x.exp() / z).collect();
            for c in 0..2 {
                expected[i][c] = a[0] * val[0][c] + a[1] * val[1][c];
            }
        }

        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let hv = tape.constant(Tensor::from_rows(&hrows.map(|r| r.to_vec())).unwrap());
        let mut f = Forward::eval(&mut tape);
        let (_, ctx) = att.attend(&mut f, &b, hv).unwrap();
        let got = tape.value(ctx).data();
        for i in 0..2 {
            for c in 0..2 {
                assert!((got[i * 2 + c] - expected[i][c]).abs() < 1e-12);
            }
        }
    }
}
