//! Define-by-run reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! enough context to apply the chain rule later. Nodes are only ever appended,
//! so a node's inputs always precede it and a single reverse sweep suffices.

use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Maximum(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    SpatialMean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics computed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose2(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn batched_transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = (rows * cols).max(1);
    data.chunks(block)
        .flat_map(|m| transpose2(m, rows, cols))
        .collect()
}

/// Splits a shape around `axis` into (outer, axis extent, inner) sizes.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownVar(var.0))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.needs(inputs);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.check(x)?, self.check(bias)?);
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [n] {
            return Err(mismatch("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.check(x)?.map(|v| v * factor);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.check(x)?.map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.check(x)?.map(f64::tanh);
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.check(x)?.map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Row-wise softmax of a 2-D tensor, max-shifted per row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        if tx.shape().len() != 2 || tx.shape()[1] == 0 {
            return Err(invalid(
                "softmax_rows",
                format!("expected non-empty 2-D input, got {:?}", tx.shape()),
            ));
        }
        let cols = tx.shape()[1];
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("softmax_rows", value, Op::SoftmaxRows(x), &[x])
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.check(
            *inputs
                .first()
                .ok_or_else(|| invalid("concat", "no inputs"))?,
        )?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(invalid(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let base = first.shape().to_vec();
        let mut extent = 0;
        for v in inputs {
            let s = self.check(*v)?.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.check(x)?;
        let value = tx
            .reshape(shape)
            .map_err(|_| mismatch("reshape", tx.shape(), shape))?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Swaps the last two axes (a plain matrix transpose for 2-D input).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let s = tx.shape();
        if s.len() < 2 {
            return Err(invalid(
                "transpose",
                format!("expected at least 2 axes, got {s:?}"),
            ));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        shape.swap(s.len() - 2, s.len() - 1);
        let data = batched_transpose(tx.data(), r, c);
        let value = Tensor::new(shape, data)?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.check(x)?.sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        if tx.is_empty() {
            return Err(invalid("mean", "empty input"));
        }
        let value = Tensor::scalar(tx.sum() / tx.len() as f64);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let tx = self.check(x)?;
        let s = tx.shape();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let (outer, extent, inner) = axis_split(s, axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&tx.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        let value = Tensor::new(shape, data)?;
        self.push(
            "slice",
            value,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            &[x],
        )
    }

    /// Valid, stride-1 cross-correlation. `input` is `[B,C,H,W]`, `kernel`
    /// `[F,C,KH,KW]`, `bias` `[F]`; output `[B,F,H-KH+1,W-KW+1]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.check(input)?, self.check(kernel)?, self.check(bias)?);
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || tb.shape() != [sk[0]] {
            return Err(mismatch("conv2d", sx, sk));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        if h < kh || w < kw {
            return Err(invalid(
                "conv2d",
                format!("input {h}x{w} smaller than kernel {kh}x{kw}"),
            ));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let (x, k, bias_v) = (tx.data(), tk.data(), tb.data());
        let mut out = vec![0.0; b * f * oh * ow];
        for bi in 0..b {
            for fi in 0..f {
                let plane = &mut out[(bi * f + fi) * oh * ow..(bi * f + fi + 1) * oh * ow];
                plane.fill(bias_v[fi]);
                for ci in 0..c {
                    let xplane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for di in 0..kh {
                        for dj in 0..kw {
                            let kv = k[((fi * c + ci) * kh + di) * kw + dj];
                            for i in 0..oh {
                                let xrow = &xplane[(i + di) * w + dj..(i + di) * w + dj + ow];
                                let orow = &mut plane[i * ow..(i + 1) * ow];
                                for (o, xv) in orow.iter_mut().zip(xrow) {
                                    *o += kv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, f, oh, ow], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            &[input, kernel, bias],
        )
    }

    /// Max pooling over `[B,C,H,W]`; trailing rows/columns that do not fill a
    /// window are dropped. Ties resolve to the first index in row-major order.
    pub fn max_pool2d(
        &mut self,
        input: Var,
        pool: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let tx = self.check(input)?;
        let s = tx.shape();
        if s.len() != 4 {
            return Err(invalid(
                "max_pool2d",
                format!("expected 4-D input, got {s:?}"),
            ));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ph, pw) = pool;
        let (sh, sw) = stride;
        if ph == 0 || pw == 0 || sh == 0 || sw == 0 {
            return Err(invalid("max_pool2d", "pool and stride must be positive"));
        }
        if h < ph || w < pw {
            return Err(invalid(
                "max_pool2d",
                format!("input {h}x{w} smaller than pool {ph}x{pw}"),
            ));
        }
        let (oh, ow) = ((h - ph) / sh + 1, (w - pw) / sw + 1);
        let x = tx.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * sh * w + j * sw;
                    for di in 0..ph {
                        for dj in 0..pw {
                            let idx = base + (i * sh + di) * w + j * sw + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push(
            "max_pool2d",
            value,
            Op::MaxPool2d { input, argmax },
            &[input],
        )
    }

    /// Per-channel batch normalization of `[B,C,H,W]`.
    ///
    /// With `running = None` the batch statistics are used (training mode)
    /// and returned; otherwise the supplied `(mean, var)` are used.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (tx, tg, tb) = (self.check(input)?, self.check(gamma)?, self.check(beta)?);
        let s = tx.shape();
        if s.len() != 4 || tg.shape() != [s[1]] || tb.shape() != [s[1]] {
            return Err(mismatch("batch_norm", s, tg.shape()));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let count = (b * hw) as f64;
        let x = tx.data();
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(invalid(
                        "batch_norm",
                        "running statistics width differs from channel count",
                    ));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        acc += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                    let mu = acc / count;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        sq += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / count;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let range = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for idx in range {
                    let n = (x[idx] - mean[ch]) * inv_std[ch];
                    normalized[idx] = n;
                    out[idx] = tg.data()[ch] * n + tb.data()[ch];
                }
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        let training = stats.is_some();
        let var_out = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            },
            &[input, gamma, beta],
        )?;
        Ok((var_out, stats))
    }

    /// Mean over the two trailing spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let tx = self.check(input)?;
        let s = tx.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(invalid(
                "spatial_mean",
                format!("expected non-empty 4-D input, got {s:?}"),
            ));
        }
        let hw = s[2] * s[3];
        let data = tx
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        self.push("spatial_mean", value, Op::SpatialMean(input), &[input])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let root_shape = self.check(loss)?.shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(root_shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(root_shape, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut contrib = |var: Var, t: Tensor| {
                if !nodes[var.0].requires_grad {
                    return;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&t.data) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let gd = g.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if nodes[a.0].requires_grad {
                        let bt = transpose2(tb.data(), k, n);
                        let mut ga = vec![0.0; m * k];
                        gemm(gd, &bt, &mut ga, m, n, k);
                        contrib(*a, Tensor::new(vec![m, k], ga)?);
                    }
                    if nodes[b.0].requires_grad {
                        let at = transpose2(ta.data(), m, k);
                        let mut gb = vec![0.0; k * n];
                        gemm(&at, gd, &mut gb, k, m, n);
                        contrib(*b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Add(a, b) => {
                    contrib(*a, g.clone());
                    contrib(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    contrib(*a, g.clone());
                    contrib(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let ga = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    let gb = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    contrib(*a, Tensor::new(ta.shape().to_vec(), ga)?);
                    contrib(*b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
                Op::Maximum(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let mut ga = vec![0.0; gd.len()];
                    let mut gb = vec![0.0; gd.len()];
                    for i in 0..gd.len() {
                        if ta.data()[i] >= tb.data()[i] {
                            ga[i] = gd[i];
                        } else {
                            gb[i] = gd[i];
                        }
                    }
                    contrib(*a, Tensor::new(ta.shape().to_vec(), ga)?);
                    contrib(*b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
                Op::AddBias(x, b) => {
                    let n = val(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in gd.chunks(n.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    contrib(*x, g.clone());
                    contrib(*b, Tensor::new(vec![n], gb)?);
                }
                Op::Scale(x, f) => contrib(*x, g.map(|v| v * f)),
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let gx = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    contrib(*x, Tensor::new(g.shape().to_vec(), gx)?);
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let gx = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    contrib(*x, Tensor::new(g.shape().to_vec(), gx)?);
                }
                Op::Relu(x) => {
                    let xv = val(*x).data();
                    let gx = gd
                        .iter()
                        .zip(xv)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    contrib(*x, Tensor::new(g.shape().to_vec(), gx)?);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.data();
                    let cols = node.value.shape()[1];
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = gd[span.clone()]
                            .iter()
                            .zip(&y[span.clone()])
                            .map(|(g, y)| g * y)
                            .sum();
                        for i in span {
                            gx[i] = y[i] * (gd[i] - dot);
                        }
                    }
                    contrib(*x, Tensor::new(g.shape().to_vec(), gx)?);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = axis_split(g.shape(), *axis);
                    let mut offset = 0;
                    let total = g.shape()[*axis] * inner;
                    for v in inputs {
                        let tv = val(*v);
                        let chunk = tv.shape()[*axis] * inner;
                        let mut gv = Vec::with_capacity(tv.len());
                        for o in 0..outer {
                            let base = o * total + offset;
                            gv.extend_from_slice(&gd[base..base + chunk]);
                        }
                        offset += chunk;
                        contrib(*v, Tensor::new(tv.shape().to_vec(), gv)?);
                    }
                }
                Op::Reshape(x) => contrib(*x, Tensor::new(val(*x).shape().to_vec(), gd.to_vec())?),
                Op::Transpose(x) => {
                    let s = val(*x).shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    contrib(*x, Tensor::new(s.to_vec(), batched_transpose(gd, c, r))?);
                }
                Op::Sum(x) => contrib(*x, Tensor::full(val(*x).shape(), gd[0])),
                Op::Mean(x) => {
                    let n = val(*x).len() as f64;
                    contrib(*x, Tensor::full(val(*x).shape(), gd[0] / n));
                }
                Op::Slice { input, axis, start } => {
                    let s = val(*input).shape();
                    let (outer, extent, inner) = axis_split(s, *axis);
                    let width = g.shape()[*axis];
                    let mut gx = vec![0.0; val(*input).len()];
                    for o in 0..outer {
                        let dst = o * extent * inner + start * inner;
                        let src = o * width * inner;
                        gx[dst..dst + width * inner].copy_from_slice(&gd[src..src + width * inner]);
                    }
                    contrib(*input, Tensor::new(s.to_vec(), gx)?);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let (tx, tk) = (val(*input), val(*kernel));
                    let (sx, sk) = (tx.shape(), tk.shape());
                    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (f, kh, kw) = (sk[0], sk[2], sk[3]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let (x, k) = (tx.data(), tk.data());
                    let mut gx = vec![0.0; x.len()];
                    let mut gk = vec![0.0; k.len()];
                    let mut gb = vec![0.0; f];
                    for bi in 0..b {
                        for fi in 0..f {
                            let gplane = &gd[(bi * f + fi) * oh * ow..(bi * f + fi + 1) * oh * ow];
                            gb[fi] += gplane.iter().sum::<f64>();
                            for ci in 0..c {
                                let xoff = (bi * c + ci) * h * w;
                                for di in 0..kh {
                                    for dj in 0..kw {
                                        let kidx = ((fi * c + ci) * kh + di) * kw + dj;
                                        let kv = k[kidx];
                                        let mut acc = 0.0;
                                        for i in 0..oh {
                                            let row = xoff + (i + di) * w + dj;
                                            let grow = &gplane[i * ow..(i + 1) * ow];
                                            for (jj, gv) in grow.iter().enumerate() {
                                                acc += gv * x[row + jj];
                                                gx[row + jj] += gv * kv;
                                            }
                                        }
                                        gk[kidx] += acc;
                                    }
                                }
                            }
                        }
                    }
                    contrib(*input, Tensor::new(sx.to_vec(), gx)?);
                    contrib(*kernel, Tensor::new(sk.to_vec(), gk)?);
                    contrib(*bias, Tensor::new(vec![f], gb)?);
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut gx = vec![0.0; val(*input).len()];
                    for (gv, &src) in gd.iter().zip(argmax) {
                        gx[src] += gv;
                    }
                    contrib(*input, Tensor::new(val(*input).shape().to_vec(), gx)?);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                    training,
                } => {
                    let s = val(*input).shape();
                    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let count = (b * hw) as f64;
                    let gam = val(*gamma).data();
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for bi in 0..b {
                        for ch in 0..c {
                            for idx in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                                ggamma[ch] += gd[idx] * normalized[idx];
                                gbeta[ch] += gd[idx];
                            }
                        }
                    }
                    let mut gx = vec![0.0; gd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for idx in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                                gx[idx] = if *training {
                                    scale
                                        * (gd[idx]
                                            - gbeta[ch] / count
                                            - normalized[idx] * ggamma[ch] / count)
                                } else {
                                    scale * gd[idx]
                                };
                            }
                        }
                    }
                    contrib(*input, Tensor::new(s.to_vec(), gx)?);
                    contrib(*gamma, Tensor::new(vec![c], ggamma)?);
                    contrib(*beta, Tensor::new(vec![c], gbeta)?);
                }
                Op::SpatialMean(input) => {
                    let s = val(*input).shape();
                    let hw = s[2] * s[3];
                    let mut gx = Vec::with_capacity(hw * gd.len());
                    for gv in gd {
                        gx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                    }
                    contrib(*input, Tensor::new(s.to_vec(), gx)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
