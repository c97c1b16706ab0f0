//! Arena tape for reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its value and enough context to
//! run its adjoint. Nodes are only ever appended, so the arena order is a
//! topological order and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::kernels::{self, Im2ColPlan, ResizePlan, LAYER_NORM_EPS};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Bce {
        p: Var,
        t: Var,
        eps: f64,
    },
    BceLogits {
        x: Var,
        t: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        denom: f64,
    },
    Resize(Var, Arc<ResizePlan>),
    Im2Col(Var, Arc<Im2ColPlan>),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records differentiable operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
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

    /// Adds an input tensor. Gradients are only accumulated for leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the loss w.r.t. `v`, available after [`Tape::backward`]
    /// for every node that requires a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Detached copy of a value as a new constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&[x]);
        self.push(value, rg, op)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&[a, b]);
        self.push(value, rg, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = kernels::transpose(self.value(a))?;
        Ok(self.unary(a, value, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.zip_map(a, b, |x, y| x / y);
        Ok(self.binary(a, b, value, Op::Div(a, b)))
    }

    /// Adds a `[d]` vector to every last-dimension slice of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(row) != [d] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(d) {
            for (x, r) in chunk.iter_mut().zip(&rv) {
                *x += r;
            }
        }
        Ok(self.binary(a, row, value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.unary(a, value, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        self.unary(a, value, Op::Gelu(a))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let value = kernels::softmax_lastdim(self.value(a))?;
        Ok(self.unary(a, value, Op::Softmax(a)))
    }

    /// Normalizes each last-dimension slice to zero mean and unit variance,
    /// then applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.outer());
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean clamped binary cross-entropy between probabilities `p` and
    /// constant targets `t`.
    pub fn binary_cross_entropy(&mut self, p: Var, t: Var, clamp_eps: f64) -> Result<Var> {
        self.same_shape("binary_cross_entropy", p, t)?;
        let loss = kernels::binary_cross_entropy(self.value(p).data(), self.value(t).data(), clamp_eps);
        Ok(self.unary(p, Tensor::scalar(loss), Op::Bce { p, t, eps: clamp_eps }))
    }

    /// Mean of `BCE(sigmoid(x), t)` evaluated in logit space.
    pub fn bce_with_logits(&mut self, x: Var, t: Var) -> Result<Var> {
        self.same_shape("bce_with_logits", x, t)?;
        let loss = kernels::bce_with_logits(self.value(x).data(), self.value(t).data());
        Ok(self.unary(x, Tensor::scalar(loss), Op::BceLogits { x, t }))
    }

    /// Mean softmax cross-entropy over rows of `logits`.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let n = labels.len();
        self.weighted_cross_entropy(logits, labels, &vec![1.0; n], n as f64)
    }

    /// `sum_i weights[i] * -log softmax(logits_i)[labels[i]] / denom`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64], denom: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() || labels.len() != weights.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len(), weights.len()]));
        }
        let k = lv.cols();
        let mut loss = 0.0;
        for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
            let row = lv.row(i);
            loss += w * (kernels::logsumexp(row) - row[label]);
        }
        let value = Tensor::scalar(loss / denom);
        Ok(self.unary(
            logits,
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                denom,
            },
        ))
    }

    /// Bilinear resize of an `h×w×c` tensor (half-pixel centers, clamped borders).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", xv.shape(), &[out_h, out_w]));
        }
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let plan = ResizePlan::new((h, w), (out_h, out_w));
        let value = Tensor::new(vec![out_h, out_w, c], plan.apply(xv.data(), c))?;
        Ok(self.unary(x, value, Op::Resize(x, Arc::new(plan))))
    }

    /// Extracts `k×k` patches of an `h×w×c` tensor into `(oh*ow)×(k*k*c)` rows.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || kernel == 0 || stride == 0 {
            return Err(Error::shape("im2col", xv.shape(), &[kernel, stride]));
        }
        let src = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if src.0 + 2 * pad < kernel || src.1 + 2 * pad < kernel {
            return Err(Error::shape("im2col", xv.shape(), &[kernel, stride]));
        }
        let plan = Im2ColPlan::new(src, kernel, stride, pad);
        let value = Tensor::new(vec![plan.out.0 * plan.out.1, plan.cols()], plan.apply(xv.data()))?;
        Ok(self.unary(x, value, Op::Im2Col(x, Arc::new(plan))))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(*first), pv.shape()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start >= end || end > xv.rows() {
            return Err(Error::shape("slice_rows", xv.shape(), &[start, end]));
        }
        let c = xv.cols();
        let value = Tensor::new(vec![end - start, c], xv.data()[start * c..end * c].to_vec())?;
        Ok(self.unary(x, value, Op::SliceRows(x, start)))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start >= end || end > xv.cols() {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, end]));
        }
        let data = (0..xv.rows()).flat_map(|r| xv.row(r)[start..end].iter().copied()).collect();
        let value = Tensor::new(vec![xv.rows(), end - start], data)?;
        Ok(self.unary(x, value, Op::SliceCols(x, start)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.unary(x, Tensor::scalar(m), Op::Mean(x))
    }

    /// `x·w + b` for `x: n×d_in`, `w: d_in×d_out`, `b: d_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Adds all terms; an empty list is an error.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| Error::Invalid("sum of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape supports exactly
    /// one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Accumulates into an input's gradient buffer if it wants one.
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(grads, *a, &mut |ga| {
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let aval = av.data()[r * k + p];
                            if aval == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aval * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                acc(grads, *a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[c * m + r] += g[r * n + c];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut |ga| add_into(ga, g));
                acc(grads, *b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |ga| add_into(ga, g));
                acc(grads, *b, &mut |gb| {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                acc(grads, *a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x / y;
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for (((o, x), y), q) in gb.iter_mut().zip(g).zip(bv).zip(out) {
                        *o -= x * q / y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, &mut |ga| add_into(ga, g));
                let d = self.value(*row).len();
                acc(grads, *row, &mut |gr| {
                    for chunk in g.chunks(d) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, f) => acc(grads, *a, &mut |ga| {
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += f * x;
                }
            }),
            Op::Sigmoid(a) => acc(grads, *a, &mut |ga| {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(out) {
                    *o += x * y * (1.0 - y);
                }
            }),
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                acc(grads, *a, &mut |ga| {
                    for ((o, x), &z) in ga.iter_mut().zip(g).zip(av) {
                        *o += x * kernels::gelu_grad(z);
                    }
                });
            }
            Op::Softmax(a) => {
                let d = node.value.last_dim();
                acc(grads, *a, &mut |ga| {
                    for ((gr, yr), or) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, x), y) in or.iter_mut().zip(gr).zip(yr) {
                            *o += y * (x - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                acc(grads, *gain, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, x), h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += x * h;
                        }
                    }
                });
                acc(grads, *bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                acc(grads, *x, &mut |gx| {
                    let mut dh = vec![0.0; d];
                    for (r, ((gr, hr), or)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        for i in 0..d {
                            dh[i] = gr[i] * gv[i];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for i in 0..d {
                            or[i] += scale * (d as f64 * dh[i] - sum_dh - hr[i] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Bce { p, t, eps } => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let n = pv.len() as f64;
                acc(grads, *p, &mut |gp| {
                    for ((o, &pr), &tr) in gp.iter_mut().zip(pv).zip(tv) {
                        if pr > *eps && pr < 1.0 - eps {
                            *o += g[0] / n * (-tr / pr + (1.0 - tr) / (1.0 - pr));
                        }
                    }
                });
            }
            Op::BceLogits { x, t } => {
                let (xv, tv) = (self.value(*x).data(), self.value(*t).data());
                let n = xv.len() as f64;
                acc(grads, *x, &mut |gx| {
                    for ((o, &z), &tr) in gx.iter_mut().zip(xv).zip(tv) {
                        *o += g[0] / n * (kernels::sigmoid(z) - tr);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                denom,
            } => {
                let lv = self.value(*logits);
                let k = lv.cols();
                acc(grads, *logits, &mut |gl| {
                    for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                        let row = lv.row(i);
                        let lse = kernels::logsumexp(row);
                        let coef = g[0] * w / denom;
                        for c in 0..k {
                            let p = (row[c] - lse).exp();
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[i * k + c] += coef * (p - onehot);
                        }
                    }
                });
            }
            Op::Resize(a, plan) => {
                let c = node.value.last_dim();
                acc(grads, *a, &mut |ga| add_into(ga, &plan.apply_transpose(g, c)));
            }
            Op::Im2Col(a, plan) => {
                acc(grads, *a, &mut |ga| add_into(ga, &plan.apply_transpose(g)));
            }
            Op::Reshape(a) => acc(grads, *a, &mut |ga| add_into(ga, g)),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g[offset..offset + len];
                    acc(grads, p, &mut |gp| add_into(gp, slice));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = (self.value(p).rows(), self.value(p).cols());
                    acc(grads, p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * cols..(r + 1) * cols], &g[r * total + offset..r * total + offset + cols]);
                        }
                    });
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.cols();
                acc(grads, *a, &mut |ga| add_into(&mut ga[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let (rows, width) = (node.value.rows(), node.value.cols());
                let full = self.value(*a).cols();
                acc(grads, *a, &mut |ga| {
                    for r in 0..rows {
                        add_into(&mut ga[r * full + start..r * full + start + width], &g[r * width..(r + 1) * width]);
                    }
                });
            }
            Op::Sum(a) => acc(grads, *a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(grads, *a, &mut |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
