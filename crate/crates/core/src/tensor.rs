//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! The tape is an arena: every operation appends a node holding its forward
//! value and the handles of its inputs. [`Tape::backward`] walks the arena in
//! reverse recording order, so each node is visited exactly once.
//!
//! Only what small MLPs need is supported: 2-D matmul, bias broadcast over the
//! last axis, elementwise activations, a row-wise log-softmax, a handful of
//! reductions, and the gradient-reversal primitive used by the adversarial
//! branch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and that the
    /// buffer length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::usage(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::dim(format!("expected a 2-D tensor, got {other:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> Result<&[f64]> {
        let (r, c) = self.dims2()?;
        if i >= r {
            return Err(Error::dim(format!("row {i} out of {r}")));
        }
        Ok(&self.data[i * c..(i + 1) * c])
    }

    /// Gathers rows `idx` of a 2-D tensor into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if idx.is_empty() {
            return Err(Error::usage("select_rows with no indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::dim(format!("row {i} out of {r}")));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![idx.len(), c], data)
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    GradReverse(Var, f64),
    LogSoftmax(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Reverse-mode gradient tape. Confined to a single worker; build one per
/// forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a trainable leaf; its gradient buffer starts at zero.
    pub fn param(&mut self, value: Tensor) -> Var {
        let grad = Some(Tensor::zeros(value.shape.clone()));
        self.push_node(Node { value, op: Op::Leaf, requires_grad: true, grad })
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Node { value, op: Op::Leaf, requires_grad: false, grad: None })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Node { value, op, requires_grad, grad: None })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions disagree: {m}x{k} by {k2}x{n}")));
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a bias vector over the last axis of a 2-D tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let bv = self.value(bias);
        if bv.numel() != cols || bv.shape().iter().filter(|&&d| d != 1).count() > 1 {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not broadcast over last axis of {rows}x{cols}",
                bv.shape()
            )));
        }
        let b = &bv.data;
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(cols) {
            row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
        }
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::AddBias(x, bias), &[x, bias]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data: out }, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a);
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|x| f(*x)).collect() };
        self.push(out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).sq_norm();
        self.push(Tensor::scalar(s), Op::SumSq(a), &[a])
    }

    /// Identity forward; the backward pass multiplies the upstream gradient by
    /// `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("gradient reversal needs a finite lambda >= 0, got {lambda}")));
        }
        let value = self.value(x).clone();
        Ok(self.push(value, Op::GradReverse(x, lambda), &[x]))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::LogSoftmax(x), &[x]))
    }

    /// Backpropagates from a one-element `loss`, adding into the gradient
    /// buffers of every reachable trainable leaf. Gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("loss was not recorded on this tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::usage(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape)));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }

        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        upstream[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = upstream[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {
                    if let Some(acc) = self.nodes[i].grad.as_mut() {
                        acc.data.iter_mut().zip(&g).for_each(|(a, gi)| *a += gi);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2()?;
                    let (_, n) = self.nodes[b.0].value.dims2()?;
                    if self.nodes[a.0].requires_grad {
                        let ga = matmul_bt(&g, &self.nodes[b.0].value.data, m, n, k);
                        accumulate(&mut upstream, a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = matmul_at(&self.nodes[a.0].value.data, &g, m, k, n);
                        accumulate(&mut upstream, b, gb);
                    }
                }
                Op::AddBias(x, bias) => {
                    let cols = self.nodes[bias.0].value.numel();
                    if self.nodes[bias.0].requires_grad {
                        let mut gb = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            gb.iter_mut().zip(row).for_each(|(s, r)| *s += r);
                        }
                        accumulate(&mut upstream, bias, gb);
                    }
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut upstream, x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut upstream, b, g.clone());
                    }
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut upstream, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut upstream, b, g.iter().map(|x| -x).collect());
                    }
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut upstream, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let bv = &self.nodes[b.0].value.data;
                        accumulate(&mut upstream, a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    }
                    if self.nodes[b.0].requires_grad {
                        let av = &self.nodes[a.0].value.data;
                        accumulate(&mut upstream, b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut upstream, a, g.iter().map(|x| c * x).collect());
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value.data;
                    let ga = g.iter().zip(av).map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 }).collect();
                    accumulate(&mut upstream, a, ga);
                }
                Op::Tanh(a) => {
                    let out = &node.value.data;
                    let ga = g.iter().zip(out).map(|(gi, t)| gi * (1.0 - t * t)).collect();
                    accumulate(&mut upstream, a, ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.numel();
                    accumulate(&mut upstream, a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.numel();
                    accumulate(&mut upstream, a, vec![g[0] / n as f64; n]);
                }
                Op::SumSq(a) => {
                    let av = &self.nodes[a.0].value.data;
                    accumulate(&mut upstream, a, av.iter().map(|x| 2.0 * x * g[0]).collect());
                }
                Op::GradReverse(a, lambda) => {
                    accumulate(&mut upstream, a, g.iter().map(|x| -lambda * x).collect());
                }
                Op::LogSoftmax(a) => {
                    let cols = node.value.shape[1];
                    let out = &node.value.data;
                    let mut ga = Vec::with_capacity(g.len());
                    for (grow, orow) in g.chunks(cols).zip(out.chunks(cols)) {
                        let gsum: f64 = grow.iter().sum();
                        ga.extend(grow.iter().zip(orow).map(|(gi, lp)| gi - lp.exp() * gsum));
                    }
                    accumulate(&mut upstream, a, ga);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(upstream: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match upstream[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, gi)| *a += gi),
        None => upstream[v.0] = Some(g),
    }
}

/// `a[m×k] · b[k×n]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

/// `g[m×n] · b[k×n]ᵀ`. Transposing `b` first keeps the inner loop contiguous;
/// the summation order matches a row-by-row dot product.
fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_raw(g, &bt, m, n, k)
}

/// `a[m×k]ᵀ · g[m×n]`.
fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            orow.iter_mut().zip(grow).for_each(|(o, gv)| *o += aip * gv);
        }
    }
    out
}
