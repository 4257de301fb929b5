//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order. Values are computed
//! eagerly during the forward pass; [`Graph::backward`] then walks the nodes
//! in strict reverse order and accumulates vector-Jacobian products. Handles
//! ([`Var`]) are plain indices, so a graph and its values stay on one thread.
//!
//! Parameters live outside the graph in a [`ParamStore`]. [`Graph::param`]
//! binds a parameter as a gradient-requiring leaf (once per graph) and
//! [`Gradients::params`] maps the result back to parameter order.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{axis_split, Tensor};

/// Layer-norm epsilon inside the square root.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    MaxOverAxis { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Sum(Var),
    Slice { x: Var, start: usize },
    RepeatRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds parameter `id` as a leaf; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if self.params.len() <= i {
            self.params.resize(i + 1, None);
        }
        if let Some(v) = self.params[i] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params[i] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, rank1) = match sa.len() {
            1 => (1, sa[0], true),
            2 => (sa[0], sa[1], false),
            _ => return Err(dim("matmul", sa, sb)),
        };
        if sb.len() != 2 || sb[0] != k {
            return Err(dim("matmul", sa, sb));
        }
        let n = sb[1];
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape: &[usize] = if rank1 { &[n] } else { &[m, n] };
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::arg(format!("transpose needs rank 2, got {:?}", xv.shape())));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let t = Tensor::new(&[c, r], transpose_raw(xv.data(), r, c))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a vector along the last axis of `x` (broadcast over rows).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || bv.len() != xv.cols() {
            return Err(dim("add_bias", xv.shape(), bv.shape()));
        }
        let n = bv.len();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bv.data()[i % n]).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = map(self.value(x), |v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = map(self.value(x), |v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = map(self.value(x), f64::tanh);
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = map(self.value(x), sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis(xv, axis)?;
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(dim("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::arg("concat of an empty list"))?;
        let base = self.value(*first).shape().to_vec();
        check_axis(self.value(*first), axis)?;
        let mut extent = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agrees {
                return Err(dim("concat", &base, s));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let xv = self.value(v);
                let chunk = xv.shape()[axis] * inner;
                out.extend_from_slice(&xv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(rows.len());
        for &r in rows {
            let n = self.value(r).len();
            reshaped.push(self.reshape(r, &[1, n])?);
        }
        self.concat(&reshaped, 0)
    }

    /// Maximum over `axis`. The subgradient goes to the first maximal element.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis(xv, axis)?;
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut vals = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for j in 1..n {
                    let idx = o * n * inner + j * inner + i;
                    if xv.data()[idx] > xv.data()[best] {
                        best = idx;
                    }
                }
                vals.push(xv.data()[best]);
                argmax.push(best);
            }
        }
        let mut shape: Vec<usize> = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(&shape, vals)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxOverAxis { x, argmax }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`, eval mode is identity.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::arg(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// `-log softmax(logits)[target]` via a fused log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return Err(Error::arg(format!("cross_entropy expects a vector, got {:?}", lv.shape())));
        }
        if target >= lv.len() {
            return Err(Error::arg(format!("target {target} out of range for {} classes", lv.len())));
        }
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lv.data().iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        let probs: Vec<f64> = lv.data().iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - lv.data()[target];
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of a list of same-shape tensors.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::arg("add_all of an empty list"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Contiguous sub-vector `x[start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 || len == 0 || start + len > xv.len() {
            return Err(Error::arg(format!(
                "slice [{start}, {}) of shape {:?}",
                start + len,
                xv.shape()
            )));
        }
        let t = Tensor::vector(xv.data()[start..start + len].to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Slice { x, start }, rg))
    }

    /// Repeats a vector as `times` identical rows.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(Error::arg("repeat_rows expects a vector"));
        }
        let t = Tensor::new(&[times, xv.len()], xv.data().repeat(times))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::RepeatRows(x), rg))
    }

    /// Reverse pass from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::arg("backward already ran on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.requires_grad, g) {
                (_, true, Some(g)) => Some(Tensor::new(n.value.shape(), g).expect("grad shape")),
                (Op::Leaf, true, None) => Some(Tensor::zeros(n.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads: out,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k;
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(bv.data(), k, n);
                    accumulate(grads, *a, &matmul_raw(g, &bt, m, n, k));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(av.data(), m, k);
                    accumulate(grads, *b, &matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                accumulate(grads, *x, &transpose_raw(g, s[0], s[1]));
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                    accumulate(grads, *a, &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.iter().zip(av.data()).map(|(g, a)| g * a).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    accumulate(grads, *x, g);
                }
                if wants(*bias) {
                    let n = val(*bias).len();
                    let mut d = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                    accumulate(grads, *bias, &d);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *x, &d);
            }
            Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Tanh(x) => {
                let d: Vec<f64> = g.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, &d);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = node.value.cols();
                let rows = inv_std.len();
                let gv = val(*gain).data();
                if wants(*gain) {
                    let mut d = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        d[i % n] += gi * xhat[i];
                    }
                    accumulate(grads, *gain, &d);
                }
                if wants(*bias) {
                    let mut d = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        d[i % n] += gi;
                    }
                    accumulate(grads, *bias, &d);
                }
                if wants(*x) {
                    let mut d = vec![0.0; g.len()];
                    for r in 0..rows {
                        let span = r * n..(r + 1) * n;
                        let dxhat: Vec<f64> = g[span.clone()].iter().zip(gv).map(|(g, w)| g * w).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            let h = xhat[r * n + c];
                            d[r * n + c] =
                                inv_std[r] / n as f64 * (n as f64 * dxhat[c] - sum_d - h * sum_dx);
                        }
                    }
                    accumulate(grads, *x, &d);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for &v in inputs {
                    let chunk = val(v).shape()[*axis] * inner;
                    if wants(v) {
                        let mut d = Vec::with_capacity(val(v).len());
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g[start..start + chunk]);
                        }
                        accumulate(grads, v, &d);
                    }
                    offset += chunk;
                }
            }
            Op::MaxOverAxis { x, argmax } => {
                let mut d = vec![0.0; val(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
                accumulate(grads, *x, &d);
            }
            Op::Dropout { x, mask } => {
                let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *x, &d);
            }
            Op::CrossEntropy { logits, target, probs } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[*target] -= g[0];
                accumulate(grads, *logits, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; val(*x).len()];
                accumulate(grads, *x, &d);
            }
            Op::Slice { x, start } => {
                let mut d = vec![0.0; val(*x).len()];
                d[*start..*start + g.len()].copy_from_slice(g);
                accumulate(grads, *x, &d);
            }
            Op::RepeatRows(x) => {
                let n = val(*x).len();
                let mut d = vec![0.0; n];
                for (i, gv) in g.iter().enumerate() {
                    d[i % n] += gv;
                }
                accumulate(grads, *x, &d);
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store`, zeros for unbound ones.
    pub fn params(&self, store: &ParamStore) -> Vec<Tensor> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| self.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.get(ParamId::from_index(i)).shape()))
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot => *slot = Some(d.to_vec()),
    }
}

fn dim(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn check_axis(t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::arg(format!("axis {axis} invalid for shape {:?}", t.shape())));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
