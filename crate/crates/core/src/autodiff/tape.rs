//! Reverse-mode tape.
//!
//! Every forward call appends a node holding its output value; `backward`
//! walks the nodes once in reverse order. Inputs always precede their
//! consumers because a `Var` can only refer to an already-recorded node.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensor with its most recent gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax { a: usize, cols: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    ScatterRows { a: usize, idx: Vec<usize> },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumLast { a: usize, cols: usize },
    Mse(usize, usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    MeanPool { a: usize, channels: usize, h: usize, w: usize, block: usize },
    Concat(Vec<usize>),
    Normalize(usize),
    WrappedMixture { mu: usize, log_sigma: usize, thetas: Vec<f64>, wraps: i32 },
    StraightThrough(usize),
    #[cfg(feature = "refiner")]
    Conv3x3 { input: usize, kernel: usize, cin: usize, cout: usize, h: usize, w: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient for `v`, zeros if the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Store the gradient of `v` into `param.grad`.
    pub fn write_to(&self, v: Var, param: &mut Parameter) {
        param.grad = self.get_or_zero(v);
    }

    /// Add `weight` times the gradient of `v` to `param.grad`.
    pub fn accumulate_into(&self, v: Var, param: &mut Parameter, weight: f64) {
        if let Some(g) = &self.grads[v.0] {
            for (p, d) in param.grad.data_mut().iter_mut().zip(g) {
                *p += weight * d;
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf: no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.value.clone())
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn last_axis(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let shape = self.shape(a);
        let cols = *shape
            .last()
            .ok_or_else(|| Error::contract(op, "needs rank >= 1"))?;
        if cols == 0 {
            return Err(Error::contract(op, "empty last axis"));
        }
        Ok((self.value(a).len() / cols, cols))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = self.value(a).dims2().unwrap();
        let n = out.shape()[1];
        self.push("matmul", out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::contract("transpose", "needs rank 2"));
        }
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a.0), &[a.0])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scaled(s);
        self.push("scale", out, Op::Scale(a.0, s), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a.0), &[a.0])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a.0), &[a.0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis("softmax", a)?;
        let mask = vec![true; rows * cols];
        self.softmax_impl(a, &mask)
    }

    /// Softmax over the last axis restricted to entries where `mask` is true;
    /// excluded entries output exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.last_axis("masked_softmax", a)?;
        if mask.len() != rows * cols {
            return Err(Error::contract("masked_softmax", "mask length"));
        }
        if mask.chunks(cols).any(|r| !r.iter().any(|&m| m)) {
            return Err(Error::contract("masked_softmax", "row with no active entry"));
        }
        self.softmax_impl(a, mask)
    }

    fn softmax_impl(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (_, cols) = self.last_axis("softmax", a)?;
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for ((xr, mr), or) in x
            .data()
            .chunks(cols)
            .zip(mask.chunks(cols))
            .zip(out.chunks_mut(cols))
        {
            let mx = xr
                .iter()
                .zip(mr)
                .filter(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
            let mut z = 0.0;
            for ((o, &v), &m) in or.iter_mut().zip(xr).zip(mr) {
                if m {
                    *o = (v - mx).exp();
                    z += *o;
                }
            }
            or.iter_mut().for_each(|o| *o /= z);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax { a: a.0, cols }, &[a.0])
    }

    /// Select rows (first axis) by index.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        if shape.is_empty() {
            return Err(Error::contract("gather_rows", "needs rank >= 1"));
        }
        let rows = shape[0];
        let width = x.len() / rows.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract("gather_rows", format!("index {bad} >= {rows}")));
        }
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = idx.len();
        let out = Tensor::new(out_shape, data)?;
        self.push("gather_rows", out, Op::GatherRows { a: a.0, idx: idx.to_vec() }, &[a.0])
    }

    /// Place row `r` of `a` at row `idx[r]` of a zero tensor with `n_rows` rows.
    /// Duplicate targets accumulate.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        if shape.is_empty() || shape[0] != idx.len() {
            return Err(Error::contract(
                "scatter_rows",
                format!("{} rows for {} indices", shape.first().copied().unwrap_or(0), idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::contract("scatter_rows", format!("index {bad} >= {n_rows}")));
        }
        let width = if idx.is_empty() { 0 } else { x.len() / idx.len() };
        let width = if idx.is_empty() { shape[1..].iter().product() } else { width };
        let mut data = vec![0.0; n_rows * width];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..width {
                data[i * width + c] += x.data()[r * width + c];
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = n_rows;
        let out = Tensor::new(out_shape, data)?;
        self.push("scatter_rows", out, Op::ScatterRows { a: a.0, idx: idx.to_vec() }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::contract("mean", "empty tensor"));
        }
        let out = Tensor::scalar(self.value(a).sum() / n as f64);
        self.push("mean", out, Op::Mean(a.0), &[a.0])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = self.last_axis("sum_last", a)?;
        let x = self.value(a);
        let data: Vec<f64> = x.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let shape = x.shape()[..x.rank() - 1].to_vec();
        let out = Tensor::new(shape, data)?;
        self.push("sum_last", out, Op::SumLast { a: a.0, cols }, &[a.0])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.len();
        if n == 0 {
            return Err(Error::contract("mse", "empty tensor"));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / n as f64);
        self.push("mse", out, Op::Mse(a.0, b.0), &[a.0, b.0])
    }

    /// Mean cross-entropy of `[N, C]` logits (or `[C]` for one sample).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.last_axis("cross_entropy", logits)?;
        if rows != labels.len() {
            return Err(Error::contract(
                "cross_entropy",
                format!("{rows} rows, {} labels", labels.len()),
            ));
        }
        if labels.iter().any(|&l| l >= cols) {
            return Err(Error::contract("cross_entropy", "label out of range"));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (r, (xr, pr)) in x.data().chunks(cols).zip(probs.chunks_mut(cols)).enumerate() {
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = xr.iter().map(|v| (v - mx).exp()).sum();
            for (p, v) in pr.iter_mut().zip(xr) {
                *p = (v - mx).exp() / z;
            }
            loss += z.ln() + mx - xr[labels[r]];
        }
        let out = Tensor::scalar(loss / rows as f64);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            &[logits.0],
        )
    }

    /// Mean over non-overlapping `block x block` tiles of a `[C, H, W]` or `[H, W]` tensor.
    pub fn mean_pool(&mut self, a: Var, block: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (channels, h, w) = match shape[..] {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => return Err(Error::contract("mean_pool", "needs rank 2 or 3")),
        };
        if block == 0 || h % block != 0 || w % block != 0 {
            return Err(Error::contract(
                "mean_pool",
                format!("{h}x{w} not divisible by block {block}"),
            ));
        }
        let (ph, pw) = (h / block, w / block);
        let x = self.value(a).data();
        let mut out = vec![0.0; channels * ph * pw];
        let inv = 1.0 / (block * block) as f64;
        for c in 0..channels {
            for y in 0..h {
                for xx in 0..w {
                    out[(c * ph + y / block) * pw + xx / block] += x[(c * h + y) * w + xx] * inv;
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = ph;
        out_shape[r - 1] = pw;
        let out = Tensor::new(out_shape, out)?;
        self.push("mean_pool", out, Op::MeanPool { a: a.0, channels, h, w, block }, &[a.0])
    }

    /// Concatenate along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::contract("concat", format!("{:?} vs tail {:?}", s, tail)));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", out, Op::Concat(ids.clone()), &ids)
    }

    /// `a / sum(a)`.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        if s == 0.0 {
            return Err(Error::contract("normalize", "zero sum"));
        }
        let out = self.value(a).scaled(1.0 / s);
        self.push("normalize", out, Op::Normalize(a.0), &[a.0])
    }

    /// Equal-weight mixture of wrapped normals on the circle, evaluated at
    /// `thetas`, summing `wraps` periodic images on each side.
    pub fn wrapped_mixture(
        &mut self,
        mu: Var,
        log_sigma: Var,
        thetas: &[f64],
        wraps: i32,
    ) -> Result<Var> {
        self.same_shape("wrapped_mixture", mu, log_sigma)?;
        if self.value(mu).rank() != 1 || self.value(mu).is_empty() {
            return Err(Error::contract("wrapped_mixture", "centers must be a non-empty vector"));
        }
        let mus = self.value(mu).data();
        let ls = self.value(log_sigma).data();
        let k = mus.len() as f64;
        let out: Vec<f64> = thetas
            .iter()
            .map(|&th| {
                mus.iter()
                    .zip(ls)
                    .map(|(&m, &l)| {
                        let s = l.exp();
                        (-wraps..=wraps)
                            .map(|w| {
                                let z = (th - m + std::f64::consts::TAU * w as f64) / s;
                                std_normal_pdf(z) / s
                            })
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / k
            })
            .collect();
        let out = Tensor::from_vec(out);
        self.push(
            "wrapped_mixture",
            out,
            Op::WrappedMixture { mu: mu.0, log_sigma: log_sigma.0, thetas: thetas.to_vec(), wraps },
            &[mu.0, log_sigma.0],
        )
    }

    /// Forward value is `hard`; the gradient passes to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::contract("straight_through", "hard/soft shape mismatch"));
        }
        self.push("straight_through", hard, Op::StraightThrough(soft.0), &[soft.0])
    }

    /// Same-padded 3x3 convolution of a `[Cin, H, W]` input with `[Cout, Cin, 3, 3]` kernels.
    #[cfg(feature = "refiner")]
    pub fn conv3x3(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (cin, h, w) = match self.shape(input)[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::contract("conv3x3", "input must be [C, H, W]")),
        };
        let cout = match self.shape(kernel)[..] {
            [o, i, 3, 3] if i == cin => o,
            _ => return Err(Error::contract("conv3x3", "kernel must be [Cout, Cin, 3, 3]")),
        };
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for i in 0..cin {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let kv = k[((o * cin + i) * 3 + dy) * 3 + dx];
                        for y in 0..h {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w {
                                let sx = xx as isize + dx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                out[(o * h + y) * w + xx] +=
                                    kv * x[(i * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, h, w], out)?;
        self.push(
            "conv3x3",
            out,
            Op::Conv3x3 { input: input.0, kernel: kernel.0, cin, cout, h, w },
            &[input.0, kernel.0],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let rg = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| self.nodes[i].value.data();
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let n = self.nodes[i].value.len();
            let slot = grads[i].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if rg(a) {
                    let bv = val(b);
                    acc(a, &mut |da| gemm(g, bv, da, m, n, k, false, true, 1.0));
                }
                if rg(b) {
                    let av = val(a);
                    acc(b, &mut |db| gemm(av, g, db, k, m, n, true, false, 1.0));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[*a].value.dims2().unwrap();
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g, 1.0));
                acc(*b, &mut |db| add_into(db, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g, 1.0));
                acc(*b, &mut |db| add_into(db, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |da| add_into(da, g, *s)),
            Op::Tanh(a) => acc(*a, &mut |da| {
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |da| {
                    for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |da| {
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            }),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |da| {
                    for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                });
            }
            Op::Softmax { a, cols } => acc(*a, &mut |da| {
                for ((dr, gr), yr) in da.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - dot);
                    }
                }
            }),
            Op::GatherRows { a, idx } => {
                let width = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                acc(*a, &mut |da| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut da[i * width..(i + 1) * width], &g[r * width..(r + 1) * width], 1.0);
                    }
                });
            }
            Op::ScatterRows { a, idx } => {
                let width = if idx.is_empty() { 0 } else { self.nodes[*a].value.len() / idx.len() };
                acc(*a, &mut |da| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut da[r * width..(r + 1) * width], &g[i * width..(i + 1) * width], 1.0);
                    }
                });
            }
            Op::Reshape(a) | Op::StraightThrough(a) => acc(*a, &mut |da| add_into(da, g, 1.0)),
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len() as f64;
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumLast { a, cols } => acc(*a, &mut |da| {
                for (dr, gi) in da.chunks_mut(*cols).zip(g) {
                    dr.iter_mut().for_each(|d| *d += gi);
                }
            }),
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = 2.0 * g[0] / va.len() as f64;
                acc(*a, &mut |da| {
                    for ((d, x), z) in da.iter_mut().zip(va).zip(vb) {
                        *d += c * (x - z);
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, x), z) in db.iter_mut().zip(va).zip(vb) {
                        *d -= c * (x - z);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let cols = probs.len() / labels.len();
                let c = g[0] / labels.len() as f64;
                acc(*logits, &mut |da| {
                    for (r, (dr, pr)) in da.chunks_mut(cols).zip(probs.chunks(cols)).enumerate() {
                        for (j, (d, p)) in dr.iter_mut().zip(pr).enumerate() {
                            let t = if j == labels[r] { 1.0 } else { 0.0 };
                            *d += c * (p - t);
                        }
                    }
                });
            }
            Op::MeanPool { a, channels, h, w, block } => {
                let (ph, pw) = (h / block, w / block);
                let inv = 1.0 / (block * block) as f64;
                acc(*a, &mut |da| {
                    for c in 0..*channels {
                        for yy in 0..*h {
                            for xx in 0..*w {
                                da[(c * h + yy) * w + xx] += g[(c * ph + yy / block) * pw + xx / block] * inv;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    let gs = &g[off..off + n];
                    acc(p, &mut |dp| add_into(dp, gs, 1.0));
                    off += n;
                }
            }
            Op::Normalize(a) => {
                let s = val(*a).iter().sum::<f64>();
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(*a, &mut |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += (gi - dot) / s;
                    }
                });
            }
            Op::WrappedMixture { mu, log_sigma, thetas, wraps } => {
                let (mus, ls) = (val(*mu), val(*log_sigma));
                let kf = mus.len() as f64;
                let mut dmu = vec![0.0; mus.len()];
                let mut dls = vec![0.0; mus.len()];
                for (i, &th) in thetas.iter().enumerate() {
                    for (c, (&m, &l)) in mus.iter().zip(ls).enumerate() {
                        let s = l.exp();
                        for w in -wraps..=*wraps {
                            let z = (th - m + std::f64::consts::TAU * w as f64) / s;
                            let phi = std_normal_pdf(z);
                            dmu[c] += g[i] * phi * z / (s * s) / kf;
                            dls[c] += g[i] * phi * (z * z - 1.0) / s / kf;
                        }
                    }
                }
                acc(*mu, &mut |d| add_into(d, &dmu, 1.0));
                acc(*log_sigma, &mut |d| add_into(d, &dls, 1.0));
            }
            #[cfg(feature = "refiner")]
            Op::Conv3x3 { input, kernel, cin, cout, h, w } => {
                let (cin, cout, h, w) = (*cin, *cout, *h, *w);
                let x = val(*input);
                let k = val(*kernel);
                let mut dx = vec![0.0; x.len()];
                let mut dk = vec![0.0; k.len()];
                for o in 0..cout {
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let ki = ((o * cin + i) * 3 + ky) * 3 + kx;
                                let mut s = 0.0;
                                for yy in 0..h {
                                    let sy = yy as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for xx in 0..w {
                                        let sx = xx as isize + kx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        let go = g[(o * h + yy) * w + xx];
                                        let xi = (i * h + sy as usize) * w + sx as usize;
                                        s += go * x[xi];
                                        dx[xi] += go * k[ki];
                                    }
                                }
                                dk[ki] += s;
                            }
                        }
                    }
                }
                acc(*input, &mut |d| add_into(d, &dx, 1.0));
                acc(*kernel, &mut |d| add_into(d, &dk, 1.0));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

pub(crate) fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (std::f64::consts::TAU).sqrt()
}
