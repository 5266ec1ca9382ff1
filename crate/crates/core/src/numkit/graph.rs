//! Reverse-mode tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! enough saved state to form the vector-Jacobian product. Backward replays
//! the nodes in reverse; it never mutates the tape, so replays are repeatable.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{
    axis_split, col2im, gemm_nn, gemm_nt, gemm_tn, im2col, layer_norm_raw, transpose_raw, ConvGeometry, ResizePlan,
};
use super::{NumError, Tensor};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var, usize),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, k: Var, geom: ConvGeometry, cols: Vec<f64> },
    Resize(Var, Rc<ResizePlan>),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64>, denom: f64 },
    Bce { logits: Var, targets: Rc<Vec<f64>> },
    Dice { logits: Var, targets: Rc<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

/// Tape of recorded operations with a registry of trainable parameters.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node on a tape.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        assert_eq!(v.graph, self.graph, "variable from a different graph");
        let shape = self.shapes[v.index].clone();
        match &self.grads[v.index] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.index].needs_grad);
        self.push_raw(value, op, needs_grad, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool, is_param: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, is_param });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) {
        assert!(v.graph == self.id && v.index < self.nodes.len(), "variable does not belong to this graph");
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t.with_requires_grad(false), Op::Leaf, false, false)
    }

    /// Records and registers a trainable parameter.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t.with_requires_grad(true), Op::Leaf, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v);
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.index].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        self.check(a);
        self.check(b);
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumError::Dimension { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(Tensor::from_parts(shape, data), op, &[a, b])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        self.check(x);
        let t = self.value(x).map(f);
        self.push(t, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a vector of length `D` to every row of a tensor whose last extent is `D`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        self.check(x);
        self.check(bias);
        let d = *self.shape(x).last().unwrap();
        if self.value(bias).numel() != d {
            return Err(NumError::Dimension { op: "add_row", lhs: self.shape(x).to_vec(), rhs: self.shape(bias).to_vec() });
        }
        let b = self.data(bias).to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(t.with_requires_grad(false), Op::AddRow(x, bias), &[x, bias]))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `C×H×W` tensor.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        self.check(x);
        self.check(bias);
        let (c, h, w) = self.value(x).dims3("add_channel")?;
        if self.value(bias).numel() != c {
            return Err(NumError::Dimension { op: "add_channel", lhs: self.shape(x).to_vec(), rhs: self.shape(bias).to_vec() });
        }
        let b = self.data(bias).to_vec();
        let mut t = self.value(x).clone();
        for (ch, plane) in t.data_mut().chunks_mut(h * w).enumerate() {
            for v in plane {
                *v += b[ch];
            }
        }
        Ok(self.push(t.with_requires_grad(false), Op::AddChannel(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// Multiplies every element by a single-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, NumError> {
        self.check(x);
        self.check(s);
        if self.value(s).numel() != 1 {
            return Err(NumError::NotScalar { shape: self.shape(s).to_vec() });
        }
        let sv = self.data(s)[0];
        let t = self.value(x).map(|v| v * sv);
        Ok(self.push(t, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a);
        self.check(b);
        let t = self.value(a).matmul(self.value(b))?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a);
        self.check(b);
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(NumError::Dimension { op: "matmul_nt", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let data = gemm_nt(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumError> {
        self.check(x);
        let t = self.value(x).transpose()?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        self.check(x);
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        self.check(x);
        let t = self.value(x).softmax(axis)?;
        Ok(self.push(t, Op::Softmax(x, axis), &[x]))
    }

    /// Row softmax of a 2-D tensor restricted to positions where `allowed` is
    /// true. Disallowed weights are exactly zero; a row with no allowed
    /// position is treated as fully allowed.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var, NumError> {
        self.check(x);
        let (rows, cols) = self.value(x).dims2("masked_softmax")?;
        if allowed.len() != rows * cols {
            return Err(NumError::Dimension { op: "masked_softmax", lhs: vec![rows, cols], rhs: vec![allowed.len()] });
        }
        let src = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let mrow = &allowed[r * cols..(r + 1) * cols];
            let rescue = !mrow.iter().any(|&m| m);
            let ok = |j: usize| rescue || mrow[j];
            let xr = &src[r * cols..(r + 1) * cols];
            let max = (0..cols).filter(|&j| ok(j)).map(|j| xr[j]).fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for j in (0..cols).filter(|&j| ok(j)) {
                let e = (xr[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::MaskedSoftmax(x), &[x]))
    }

    /// Layer normalization over the last axis; `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumError> {
        self.check(x);
        let d = *self.shape(x).last().unwrap();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(NumError::Dimension { op: "layer_norm", lhs: self.shape(x).to_vec(), rhs: self.shape(gamma).to_vec() });
        }
        let (out, xhat, rstd) = layer_norm_raw(self.data(x), d, self.data(gamma), self.data(beta), eps);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var, NumError> {
        self.check(x);
        self.check(kernels);
        let geom = ConvGeometry::new(self.value(x), self.value(kernels), stride, pad)?;
        let cols = im2col(self.data(x), &geom);
        let out = gemm_nn(self.data(kernels), &cols, geom.c_out, geom.col_rows(), geom.out_len());
        let t = Tensor::from_parts(vec![geom.c_out, geom.out_h, geom.out_w], out);
        Ok(self.push(t, Op::Conv2d { x, k: kernels, geom, cols }, &[x, kernels]))
    }

    pub fn bilinear_resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var, NumError> {
        self.check(x);
        let (c, in_h, in_w) = self.value(x).dims3("bilinear_resize")?;
        if in_h == h && in_w == w {
            return Ok(x);
        }
        if h == 0 || w == 0 {
            return Err(NumError::Dimension { op: "bilinear_resize", lhs: self.shape(x).to_vec(), rhs: vec![h, w] });
        }
        let plan = Rc::new(ResizePlan::new(in_h, in_w, h, w));
        let t = Tensor::from_parts(vec![c, h, w], plan.forward(self.data(x), c));
        Ok(self.push(t, Op::Resize(x, plan), &[x]))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = *parts.first().ok_or(NumError::Empty { op: "concat" })?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(NumError::Dimension { op: "concat", lhs: self.shape(first).to_vec(), rhs: s.to_vec() });
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumError> {
        self.check(x);
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[0] {
            return Err(NumError::Dimension { op: "slice_rows", lhs: shape, rhs: vec![start, end] });
        }
        let row: usize = shape[1..].iter().product();
        let data = self.data(x)[start * row..end * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::SliceRows(x, start), &[x]))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumError> {
        self.check(x);
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(NumError::Dimension { op: "slice_cols", lhs: vec![m, n], rhs: vec![start, end] });
        }
        let src = self.data(x);
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, w], data), Op::SliceCols(x, start), &[x]))
    }

    /// Concatenates 2-D tensors side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = *parts.first().ok_or(NumError::Empty { op: "concat_cols" })?;
        let (m, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_cols")?;
            if pm != m {
                return Err(NumError::Dimension { op: "concat_cols", lhs: self.shape(first).to_vec(), rhs: vec![pm, pn] });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..m {
                data[r * n + off..r * n + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Selects rows of a 2-D tensor by index (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumError> {
        self.check(x);
        let (m, n) = self.value(x).dims2("gather_rows")?;
        if indices.is_empty() || indices.iter().any(|&i| i >= m) {
            return Err(NumError::Dimension { op: "gather_rows", lhs: vec![m, n], rhs: indices.to_vec() });
        }
        let src = self.data(x);
        let data = indices.iter().flat_map(|&i| src[i * n..(i + 1) * n].iter().copied()).collect();
        Ok(self.push(Tensor::from_parts(vec![indices.len(), n], data), Op::GatherRows(x, indices.to_vec()), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.check(x);
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Weighted mean cross-entropy of row logits against class indices:
    /// `Σ wᵢ·(−log softmax(xᵢ)[tᵢ]) / Σ wᵢ`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var, NumError> {
        self.check(logits);
        let (n, k) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != n || weights.len() != n || targets.iter().any(|&t| t >= k) {
            return Err(NumError::Dimension { op: "cross_entropy", lhs: vec![n, k], rhs: vec![targets.len(), weights.len()] });
        }
        let denom: f64 = weights.iter().sum();
        if denom <= 0.0 {
            return Err(NumError::Empty { op: "cross_entropy" });
        }
        let probs = self.value(logits).softmax(1)?.into_data();
        let x = self.data(logits);
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, denom };
        Ok(self.push(Tensor::scalar(loss / denom), op, &[logits]))
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Vec<f64>>) -> Result<Var, NumError> {
        self.check(logits);
        let x = self.data(logits);
        if x.len() != targets.len() {
            return Err(NumError::Dimension { op: "bce_with_logits", lhs: self.shape(logits).to_vec(), rhs: vec![targets.len()] });
        }
        let s: f64 = x.iter().zip(targets.iter()).map(|(&v, &t)| softplus(v) - v * t).sum();
        let loss = s / x.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logits, targets }, &[logits]))
    }

    /// Mean over rows of the smoothed dice loss
    /// `1 − (2·Σσ(x)t + 1) / (Σσ(x) + Σt + 1)`, rows taken along the leading axis.
    pub fn dice_loss(&mut self, logits: Var, targets: Rc<Vec<f64>>) -> Result<Var, NumError> {
        self.check(logits);
        let shape = self.shape(logits).to_vec();
        let x = self.data(logits);
        if x.len() != targets.len() {
            return Err(NumError::Dimension { op: "dice_loss", lhs: shape, rhs: vec![targets.len()] });
        }
        let rows = shape[0];
        let p = x.len() / rows;
        let mut loss = 0.0;
        for r in 0..rows {
            let (num, den) = dice_terms(&x[r * p..(r + 1) * p], &targets[r * p..(r + 1) * p]);
            loss += 1.0 - num / den;
        }
        Ok(self.push(Tensor::scalar(loss / rows as f64), Op::Dice { logits, targets }, &[logits]))
    }

    /// Gradients of a scalar with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        self.check(loss);
        if self.value(loss).numel() != 1 {
            return Err(NumError::NotScalar { shape: self.shape(loss).to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { graph: self.id, grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    /// `∂loss/∂p` for each registered parameter `p`.
    pub fn gradient(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>, NumError> {
        for &p in params {
            if p.graph != self.id || p.index >= self.nodes.len() || !self.nodes[p.index].is_param {
                return Err(NumError::UnregisteredParameter { index: p.index });
            }
        }
        let grads = self.backward(loss)?;
        Ok(params.iter().map(|&p| grads.get(p)).collect())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, delta: Vec<f64>| {
            if self.nodes[v.index].needs_grad {
                accumulate(&mut grads[v.index], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    send(*b, g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, b) => {
                send(*x, g.to_vec());
                if self.wants(*b) {
                    let d = self.value(*b).numel();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    send(*b, db);
                }
            }
            Op::AddChannel(x, b) => {
                send(*x, g.to_vec());
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let plane = g.len() / c;
                    send(*b, g.chunks(plane).map(|p| p.iter().sum()).collect());
                }
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
            Op::MulScalar(x, s) => {
                let sv = self.data(*s)[0];
                if self.wants(*x) {
                    send(*x, g.iter().map(|v| v * sv).collect());
                }
                if self.wants(*s) {
                    let d: f64 = g.iter().zip(self.data(*x)).map(|(a, b)| a * b).sum();
                    send(*s, vec![d]);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    send(*a, gemm_nt(g, self.data(*b), m, n, k));
                }
                if self.wants(*b) {
                    send(*b, gemm_tn(self.data(*a), g, k, m, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.wants(*a) {
                    send(*a, gemm_nn(g, self.data(*b), m, n, k));
                }
                if self.wants(*b) {
                    send(*b, gemm_tn(g, self.data(*a), n, m, k));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                send(*x, transpose_raw(g, n, m));
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis, "softmax").unwrap();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |t: usize| (o * len + t) * inner + c;
                        let dotp: f64 = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..len {
                            dx[at(t)] = y[at(t)] * (g[at(t)] - dotp);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dotp);
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gm = self.data(*gamma);
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rs * (gr[j] * gm[j] - m1 - hr[j] * m2);
                        }
                    }
                    send(*x, dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    send(*gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    send(*beta, db);
                }
            }
            Op::Gelu(x) => send(*x, g.iter().zip(self.data(*x)).map(|(a, &v)| a * gelu_parts(v).1).collect()),
            Op::Relu(x) => send(*x, g.iter().zip(self.data(*x)).map(|(a, &v)| if v > 0.0 { *a } else { 0.0 }).collect()),
            Op::Sigmoid(x) => send(*x, g.iter().zip(node.value.data()).map(|(a, &s)| a * s * (1.0 - s)).collect()),
            Op::Conv2d { x, k, geom, cols } => {
                let (rows, n) = (geom.col_rows(), geom.out_len());
                if self.wants(*k) {
                    send(*k, gemm_nt(g, cols, geom.c_out, n, rows));
                }
                if self.wants(*x) {
                    let dcols = gemm_tn(self.data(*k), g, rows, geom.c_out, n);
                    send(*x, col2im(&dcols, geom));
                }
            }
            Op::Resize(x, plan) => send(*x, plan.backward(g, self.shape(*x)[0])),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    send(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                let row: usize = self.shape(*x)[1..].iter().product();
                dx[start * row..start * row + g.len()].copy_from_slice(g);
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g[r * n + off..r * n + off + w]);
                    }
                    send(p, dp);
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = node.value.shape()[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, dx);
            }
            Op::GatherRows(x, idx) => {
                let n = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] += g[r * n + j];
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::CrossEntropy { logits, targets, weights, probs, denom } => {
                let k = self.shape(*logits)[1];
                let mut dx = vec![0.0; probs.len()];
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = g[0] * w / denom;
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dx[i * k + j] = s * (probs[i * k + j] - onehot);
                    }
                }
                send(*logits, dx);
            }
            Op::Bce { logits, targets } => {
                let n = targets.len() as f64;
                send(*logits, self.data(*logits).iter().zip(targets.iter()).map(|(&v, &t)| g[0] * (sigmoid(v) - t) / n).collect());
            }
            Op::Dice { logits, targets } => {
                let x = self.data(*logits);
                let rows = self.shape(*logits)[0];
                let p = x.len() / rows;
                let mut dx = vec![0.0; x.len()];
                for r in 0..rows {
                    let xr = &x[r * p..(r + 1) * p];
                    let tr = &targets[r * p..(r + 1) * p];
                    let (num, den) = dice_terms(xr, tr);
                    for j in 0..p {
                        let s = sigmoid(xr[j]);
                        let dl_ds = -(2.0 * tr[j] * den - num) / (den * den);
                        dx[r * p + j] = g[0] / rows as f64 * dl_ds * s * (1.0 - s);
                    }
                }
                send(*logits, dx);
            }
        }
    }
}

/// Numerator and denominator of the smoothed dice coefficient.
pub(crate) fn dice_terms(logits: &[f64], targets: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut ps = 0.0;
    let mut ts = 0.0;
    for (&x, &t) in logits.iter().zip(targets) {
        let s = sigmoid(x);
        inter += s * t;
        ps += s;
        ts += t;
    }
    (2.0 * inter + 1.0, ps + ts + 1.0)
}
