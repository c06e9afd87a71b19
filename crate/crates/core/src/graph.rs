//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded eagerly on a [`Graph`] in topological order. Every
//! vector-Jacobian product is itself expressed with graph operations, so the
//! operation set is closed under differentiation. Running [`Graph::backward`]
//! in [`BackwardMode::Differentiable`] keeps the recorded backward pass on the
//! graph; the returned gradients are ordinary nodes that later objectives can
//! consume and differentiate again.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a / b`, defined as 0 wherever `b == 0`.
    SafeDiv(NodeId, NodeId),
    /// `scale * a + shift`; only the scale matters for differentiation.
    Affine(NodeId, f64),
    Exp(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    NormRows(NodeId),
    LogSumExpRows(NodeId),
    SumTo(NodeId),
    BroadcastTo(NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
    MatMul(NodeId, NodeId),
    IndexSelect(NodeId, Rc<[usize]>),
    IndexAdd(NodeId, Rc<[usize]>),
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, pad: usize },
    ConvInputGrad { grad: NodeId, kernel: NodeId, stride: usize, pad: usize },
    ConvWeightGrad { input: NodeId, grad: NodeId, stride: usize, pad: usize },
    AvgPool(NodeId, usize),
    AvgPoolAdjoint(NodeId, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Whether the backward pass is recorded for higher-order differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardMode {
    /// Plain gradients; intermediate backward nodes are discarded.
    Values,
    /// Gradients stay on the graph as differentiable nodes.
    Differentiable,
}

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub value: Tensor,
    /// Present only for gradients computed in differentiable mode.
    pub node: Option<NodeId>,
}

/// Gradients of one objective, one entry per requested leaf, in request order.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    entries: Vec<GradEntry>,
    differentiable: bool,
}

impl GradientMap {
    pub fn from_values(entries: Vec<(String, Tensor)>) -> Self {
        GradientMap {
            entries: entries
                .into_iter()
                .map(|(name, value)| GradEntry { name, value, node: None })
                .collect(),
            differentiable: false,
        }
    }

    pub fn entries(&self) -> &[GradEntry] {
        &self.entries
    }

    pub fn is_differentiable(&self) -> bool {
        self.differentiable
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A differentiable input (parameter or pixel set).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let rg = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, op, rg)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push_derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push_derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push_derived(v, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise division with `x / 0 := 0`.
    pub fn safe_div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self
            .value(a)
            .zip_map(self.value(b), "safe_div", |x, y| if y == 0.0 { 0.0 } else { x / y })?;
        Ok(self.push_derived(v, Op::SafeDiv(a, b), &[a, b]))
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push_derived(v, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.affine(a, factor, 0.0)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -1.0, 0.0)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push_derived(v, Op::Exp(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push_derived(v, Op::Softplus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push_derived(v, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push_derived(v, Op::Abs(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_derived(v, Op::Relu(a), &[a])
    }

    // ---- reductions and shape ----------------------------------------------

    /// Euclidean norm of each row of an `N×D` matrix, as `N×1`.
    pub fn norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.matrix_dims("norm_rows", a)?;
        let src = self.value(a).data();
        let out = (0..n)
            .map(|i| src[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(self.push_derived(Tensor::from_raw(vec![n, 1], out), Op::NormRows(a), &[a]))
    }

    /// Row-wise log-sum-exp of an `N×C` matrix, as `N×1`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, c) = self.matrix_dims("logsumexp_rows", a)?;
        let src = self.value(a).data();
        let out = (0..n)
            .map(|i| {
                let row = &src[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        Ok(self.push_derived(Tensor::from_raw(vec![n, 1], out), Op::LogSumExpRows(a), &[a]))
    }

    /// Sums down to `target` (same rank; each extent equal or 1).
    pub fn sum_to(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let src = self.shape(a);
        if src.len() != target.len() || src.iter().zip(target).any(|(&s, &t)| t != s && t != 1) {
            return Err(Error::shape("sum_to", src, target));
        }
        let v = kernels::sum_to(self.value(a), target);
        Ok(self.push_derived(v, Op::SumTo(a), &[a]))
    }

    /// Repeats unit extents up to `target` (same rank).
    pub fn broadcast_to(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let src = self.shape(a);
        if src.len() != target.len() || src.iter().zip(target).any(|(&s, &t)| s != t && s != 1) {
            return Err(Error::shape("broadcast_to", src, target));
        }
        let v = kernels::broadcast_to(self.value(a), target);
        Ok(self.push_derived(v, Op::BroadcastTo(a), &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push_derived(v, Op::Reshape(a), &[a]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let numel = self.value(a).numel();
        let flat = self.reshape(a, &[numel])?;
        self.sum_to(flat, &[1])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let numel = self.value(a).numel();
        let s = self.sum(a)?;
        Ok(self.scale(s, 1.0 / numel as f64))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.matrix_dims("transpose", a)?;
        let v = kernels::transpose(self.value(a));
        Ok(self.push_derived(v, Op::Transpose(a), &[a]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, k) = self.matrix_dims("matmul", a)?;
        let (k2, _) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let v = kernels::matmul(self.value(a), self.value(b));
        Ok(self.push_derived(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · weight + bias` for `x: N×D`, `weight: D×M`, `bias: M`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, weight)?;
        let (n, m) = (self.shape(y)[0], self.shape(y)[1]);
        if self.shape(bias) != [m] {
            return Err(Error::shape("linear", self.shape(bias), &[m]));
        }
        let b = self.reshape(bias, &[1, m])?;
        let b = self.broadcast_to(b, &[n, m])?;
        self.add(y, b)
    }

    /// Concatenates along the leading axis. Built from one-hot placement
    /// matrices, so it differentiates like any matmul.
    pub fn concat_outer(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_outer", "no parts"))?;
        let tail = self.shape(first)[1..].to_vec();
        let inner: usize = tail.iter().product();
        let mut leads = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::shape("concat_outer", self.shape(first), self.shape(p)));
            }
            leads.push(self.shape(p)[0]);
        }
        let total: usize = leads.iter().sum();
        let mut out: Option<NodeId> = None;
        let mut offset = 0;
        for (&p, &n) in parts.iter().zip(&leads) {
            let mut place = vec![0.0; total * n];
            for i in 0..n {
                place[(offset + i) * n + i] = 1.0;
            }
            let place = self.constant(Tensor::from_raw(vec![total, n], place));
            let flat = self.reshape(p, &[n, inner])?;
            let placed = self.matmul(place, flat)?;
            out = Some(match out {
                None => placed,
                Some(acc) => self.add(acc, placed)?,
            });
            offset += n;
        }
        let mut shape = vec![total];
        shape.extend(tail);
        self.reshape(out.unwrap(), &shape)
    }

    /// Selects rows of the leading axis. Indices may repeat.
    pub fn index_select(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        let lead = v.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= lead) {
            return Err(Error::invalid("index_select", format!("index {bad} out of range for extent {lead}")));
        }
        if indices.is_empty() {
            return Err(Error::invalid("index_select", "empty index list"));
        }
        let inner: usize = v.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let t = Tensor::from_raw(shape, data);
        Ok(self.push_derived(t, Op::IndexSelect(a, indices.into()), &[a]))
    }

    /// Adjoint of [`Graph::index_select`]: accumulates rows into `lead` slots.
    fn index_add(&mut self, a: NodeId, indices: Rc<[usize]>, lead: usize) -> NodeId {
        let v = self.value(a);
        let inner: usize = v.shape()[1..].iter().product();
        let mut data = vec![0.0; lead * inner];
        for (row, &i) in indices.iter().enumerate() {
            for (d, s) in data[i * inner..(i + 1) * inner]
                .iter_mut()
                .zip(&v.data()[row * inner..(row + 1) * inner])
            {
                *d += s;
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = lead;
        self.push_derived(Tensor::from_raw(shape, data), Op::IndexAdd(a, indices), &[a])
    }

    fn matrix_dims(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        match self.shape(a) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::invalid(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    // ---- convolution and pooling ---------------------------------------------

    fn conv_geom(&self, op: &'static str, x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
        let ([n, c, h, w], [o, kc, kh, kw]) = (x, k) else {
            return Err(Error::shape(op, x, k));
        };
        if c != kc || stride == 0 {
            return Err(Error::shape(op, x, k));
        }
        let oh = ConvGeom::output_extent(*h, *kh, stride, pad);
        let ow = ConvGeom::output_extent(*w, *kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(op, x, k));
        };
        Ok(ConvGeom {
            n: *n,
            c: *c,
            h: *h,
            w: *w,
            o: *o,
            kh: *kh,
            kw: *kw,
            oh,
            ow,
            stride,
            pad,
        })
    }

    /// Cross-correlation of `NCHW` input with an `OIHW` kernel, no bias.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let g = self.conv_geom("conv2d", self.shape(input), self.shape(kernel), stride, pad)?;
        let out = kernels::conv2d(self.value(input).data(), self.value(kernel).data(), &g);
        let t = Tensor::from_raw(vec![g.n, g.o, g.oh, g.ow], out);
        Ok(self.push_derived(t, Op::Conv2d { input, kernel, stride, pad }, &[input, kernel]))
    }

    /// Convolution followed by a per-output-channel bias.
    pub fn conv2d_bias(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let y = self.conv2d(input, kernel, stride, pad)?;
        let shape = self.shape(y).to_vec();
        if self.shape(bias) != [shape[1]] {
            return Err(Error::shape("conv2d", self.shape(bias), &shape[1..2]));
        }
        let b = self.reshape(bias, &[1, shape[1], 1, 1])?;
        let b = self.broadcast_to(b, &shape)?;
        self.add(y, b)
    }

    fn conv_input_grad(&mut self, grad: NodeId, kernel: NodeId, input_shape: &[usize], stride: usize, pad: usize) -> Result<NodeId> {
        let g = self.conv_geom("conv2d_input_grad", input_shape, self.shape(kernel), stride, pad)?;
        let out = kernels::conv2d_input_grad(self.value(grad).data(), self.value(kernel).data(), &g);
        let t = Tensor::from_raw(input_shape.to_vec(), out);
        Ok(self.push_derived(t, Op::ConvInputGrad { grad, kernel, stride, pad }, &[grad, kernel]))
    }

    fn conv_weight_grad(&mut self, input: NodeId, grad: NodeId, kernel_shape: &[usize], stride: usize, pad: usize) -> Result<NodeId> {
        let g = self.conv_geom("conv2d_weight_grad", self.shape(input), kernel_shape, stride, pad)?;
        let out = kernels::conv2d_weight_grad(self.value(input).data(), self.value(grad).data(), &g);
        let t = Tensor::from_raw(kernel_shape.to_vec(), out);
        Ok(self.push_derived(t, Op::ConvWeightGrad { input, grad, stride, pad }, &[input, grad]))
    }

    /// Non-overlapping `window × window` mean pooling.
    pub fn avg_pool(&mut self, a: NodeId, window: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 4 || window == 0 || !s[2].is_multiple_of(window) || !s[3].is_multiple_of(window) {
            return Err(Error::invalid(
                "avg_pool",
                format!("shape {s:?} not divisible by window {window}"),
            ));
        }
        let v = kernels::avg_pool(self.value(a), window);
        Ok(self.push_derived(v, Op::AvgPool(a, window), &[a]))
    }

    fn avg_pool_adjoint(&mut self, a: NodeId, window: usize) -> NodeId {
        let v = kernels::avg_pool_adjoint(self.value(a), window);
        self.push_derived(v, Op::AvgPoolAdjoint(a, window), &[a])
    }

    // ---- differentiation ---------------------------------------------------

    /// Gradients of the scalar `objective` with respect to `leaves`.
    ///
    /// Leaves that the objective does not depend on get zero gradients. In
    /// [`BackwardMode::Differentiable`] the returned entries carry node ids.
    pub fn backward(&mut self, objective: NodeId, leaves: &[(&str, NodeId)], mode: BackwardMode) -> Result<GradientMap> {
        if !self.value(objective).is_scalar() {
            return Err(Error::NonScalarObjective(self.shape(objective).to_vec()));
        }
        let mark = self.nodes.len();
        let saved = self.grad_enabled;
        self.grad_enabled = mode == BackwardMode::Differentiable;
        let result = self.backward_inner(objective, leaves, mode);
        self.grad_enabled = saved;
        if mode == BackwardMode::Values {
            self.nodes.truncate(mark);
        }
        result
    }

    /// Second-order step: differentiates a function of gradients that were
    /// produced by a differentiable-mode [`Graph::backward`].
    pub fn backward_through_gradients(
        &mut self,
        meta_objective: NodeId,
        inner: &GradientMap,
        leaves: &[(&str, NodeId)],
    ) -> Result<GradientMap> {
        if !inner.is_differentiable() {
            return Err(Error::NotDifferentiable);
        }
        self.backward(meta_objective, leaves, BackwardMode::Values)
    }

    fn backward_inner(&mut self, objective: NodeId, leaves: &[(&str, NodeId)], mode: BackwardMode) -> Result<GradientMap> {
        let root = objective.0;
        let mut grads: Vec<Option<NodeId>> = vec![None; root + 1];
        if self.nodes[root].requires_grad {
            let shape = self.shape(objective).to_vec();
            grads[root] = Some(self.constant(Tensor::ones(&shape)));
        }
        // Restrict the sweep to ancestors of the objective.
        let mut needed = vec![false; root + 1];
        needed[root] = true;
        for i in (0..=root).rev() {
            if !needed[i] || !self.nodes[i].requires_grad {
                continue;
            }
            for input in op_inputs(&self.nodes[i].op) {
                needed[input.0] = true;
            }
        }
        for i in (0..=root).rev() {
            let Some(g) = grads[i] else { continue };
            if !needed[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contribution) in self.vjp(NodeId(i), &op, g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    None => contribution,
                    Some(acc) => self.add(acc, contribution)?,
                });
            }
        }
        let mut entries = Vec::with_capacity(leaves.len());
        for &(name, leaf) in leaves {
            let found = grads.get(leaf.0).copied().flatten();
            let node = match found {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(leaf));
                    self.constant(zeros)
                }
            };
            entries.push(GradEntry {
                name: name.to_string(),
                value: self.value(node).clone(),
                node: (mode == BackwardMode::Differentiable).then_some(node),
            });
        }
        Ok(GradientMap {
            entries,
            differentiable: mode == BackwardMode::Differentiable,
        })
    }

    /// Contributions of upstream gradient `g` (w.r.t. node `out`) to its inputs.
    fn vjp(&mut self, out: NodeId, op: &Op, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let rg = |s: &Self, n: NodeId| s.nodes[n.0].requires_grad;
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                res.push((a, g));
                res.push((b, g));
            }
            Op::Sub(a, b) => {
                res.push((a, g));
                if rg(self, b) {
                    res.push((b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if rg(self, a) {
                    res.push((a, self.mul(g, b)?));
                }
                if rg(self, b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::SafeDiv(a, b) => {
                if rg(self, a) {
                    res.push((a, self.safe_div(g, b)?));
                }
                if rg(self, b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = self.mul(g, out)?;
                    let t = self.safe_div(t, b)?;
                    res.push((b, self.neg(t)));
                }
            }
            Op::Affine(a, scale) => res.push((a, self.scale(g, scale))),
            Op::Exp(a) => res.push((a, self.mul(g, out)?)),
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                res.push((a, self.mul(g, s)?));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.affine(out, -1.0, 1.0);
                let d = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, d)?));
            }
            Op::Abs(a) => {
                let sign = self.value(a).map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                let sign = self.constant(sign);
                res.push((a, self.mul(g, sign)?));
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                res.push((a, self.mul(g, mask)?));
            }
            Op::NormRows(a) => {
                let shape = self.shape(a).to_vec();
                let r = self.safe_div(g, out)?;
                let r = self.broadcast_to(r, &shape)?;
                res.push((a, self.mul(a, r)?));
            }
            Op::LogSumExpRows(a) => {
                let shape = self.shape(a).to_vec();
                let lse = self.broadcast_to(out, &shape)?;
                let centered = self.sub(a, lse)?;
                let softmax = self.exp(centered);
                let gb = self.broadcast_to(g, &shape)?;
                res.push((a, self.mul(gb, softmax)?));
            }
            Op::SumTo(a) => {
                let shape = self.shape(a).to_vec();
                res.push((a, self.broadcast_to(g, &shape)?));
            }
            Op::BroadcastTo(a) => {
                let shape = self.shape(a).to_vec();
                res.push((a, self.sum_to(g, &shape)?));
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                res.push((a, self.reshape(g, &shape)?));
            }
            Op::Transpose(a) => res.push((a, self.transpose(g)?)),
            Op::MatMul(a, b) => {
                if rg(self, a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if rg(self, b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::IndexSelect(a, ref idx) => {
                let lead = self.shape(a)[0];
                res.push((a, self.index_add(g, idx.clone(), lead)));
            }
            Op::IndexAdd(a, ref idx) => res.push((a, self.index_select(g, idx)?)),
            Op::Conv2d { input, kernel, stride, pad } => {
                if rg(self, input) {
                    let shape = self.shape(input).to_vec();
                    res.push((input, self.conv_input_grad(g, kernel, &shape, stride, pad)?));
                }
                if rg(self, kernel) {
                    let shape = self.shape(kernel).to_vec();
                    res.push((kernel, self.conv_weight_grad(input, g, &shape, stride, pad)?));
                }
            }
            Op::ConvInputGrad { grad, kernel, stride, pad } => {
                // out = convT(grad, kernel); adjoints are conv(g, kernel) and convW(g, grad).
                if rg(self, grad) {
                    res.push((grad, self.conv2d(g, kernel, stride, pad)?));
                }
                if rg(self, kernel) {
                    let shape = self.shape(kernel).to_vec();
                    res.push((kernel, self.conv_weight_grad(g, grad, &shape, stride, pad)?));
                }
            }
            Op::ConvWeightGrad { input, grad, stride, pad } => {
                // out = convW(input, grad); adjoints are convT(grad, g) and conv(input, g).
                if rg(self, input) {
                    let shape = self.shape(input).to_vec();
                    res.push((input, self.conv_input_grad(grad, g, &shape, stride, pad)?));
                }
                if rg(self, grad) {
                    res.push((grad, self.conv2d(input, g, stride, pad)?));
                }
            }
            Op::AvgPool(a, k) => res.push((a, self.avg_pool_adjoint(g, k))),
            Op::AvgPoolAdjoint(a, k) => res.push((a, self.avg_pool(g, k)?)),
        }
        Ok(res)
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::SafeDiv(a, b) | Op::MatMul(a, b) => vec![a, b],
        Op::Affine(a, ..)
        | Op::Exp(a)
        | Op::Softplus(a)
        | Op::Sigmoid(a)
        | Op::Abs(a)
        | Op::Relu(a)
        | Op::NormRows(a)
        | Op::LogSumExpRows(a)
        | Op::SumTo(a)
        | Op::BroadcastTo(a)
        | Op::Reshape(a)
        | Op::Transpose(a)
        | Op::IndexSelect(a, _)
        | Op::IndexAdd(a, _)
        | Op::AvgPool(a, _)
        | Op::AvgPoolAdjoint(a, _) => vec![a],
        Op::Conv2d { input, kernel, .. } => vec![input, kernel],
        Op::ConvInputGrad { grad, kernel, .. } => vec![grad, kernel],
        Op::ConvWeightGrad { input, grad, .. } => vec![input, grad],
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d_bias(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 4, 4], &(0..64).map(|v| v as f64).collect::<Vec<_>>()));
        let k = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.conv2d_bias(x, k, b, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[2, 3, 4, 4]);
        for (i, &val) in v.data().iter().enumerate() {
            let ch = (i / 16) % 3;
            assert_eq!(val, [0.5, -1.0, 2.0][ch]);
        }
    }

    #[test]
    fn conv_hand_evaluation() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let k = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = g.conv2d(x, k, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 4, 4]") && err.contains("[2, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn relu_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let x = g.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = g.relu(x);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s, &[("x", x)], BackwardMode::Values).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0]));
        let y = g.relu(x);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s, &[("x", x)], BackwardMode::Values).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn avg_pool_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 3., 5., 7.]));
        let y = g.avg_pool(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let c = g.constant(Tensor::full(&[1, 2, 4, 4], 0.3));
        let y = g.avg_pool(c, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let y = g.avg_pool(c, 1).unwrap();
        assert_eq!(g.value(y), g.value(c));
        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(g.avg_pool(odd, 2).is_err());
    }

    #[test]
    fn linear_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1., 2.]));
        let w = g.constant(t(&[2, 1], &[1., 1.]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);

        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let zb = g.constant(Tensor::zeros(&[2]));
        let y = g.linear(x, eye, zb).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let zw = g.constant(Tensor::zeros(&[2, 3]));
        let bb = g.constant(t(&[3], &[1., 2., 3.]));
        let y = g.linear(x, zw, bb).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 1., 2., 3.]);

        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.linear(x, bad, b).is_err());
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, &[("x", x)], BackwardMode::Values).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_constant_objective_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(4.0));
        let grads = g.backward(c, &[("x", x)], BackwardMode::Values).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x, &[("x", x)], BackwardMode::Values),
            Err(Error::NonScalarObjective(_))
        ));
    }

    #[test]
    fn values_mode_discards_backward_nodes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let before = g.len();
        g.backward(s, &[("x", x)], BackwardMode::Values).unwrap();
        assert_eq!(g.len(), before);
    }

    #[test]
    fn second_order_cubic() {
        // f(x) = x³, meta = f'(x)² → d meta/dx = 2 f' f'' = 288 at x = 2.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let x2 = g.mul(x, x).unwrap();
        let f = g.mul(x2, x).unwrap();
        let inner = g.backward(f, &[("x", x)], BackwardMode::Differentiable).unwrap();
        let df = inner.entries()[0].node.unwrap();
        assert_eq!(g.value(df).data(), &[12.0]);
        let meta = g.mul(df, df).unwrap();
        let outer = g.backward_through_gradients(meta, &inner, &[("x", x)]).unwrap();
        assert_eq!(outer.get("x").unwrap().data(), &[288.0]);
    }

    #[test]
    fn concat_outer_stacks_and_splits_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat_outer(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let sq = g.mul(c, c).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s, &[("a", a)], BackwardMode::Values).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[2.0, 4.0]);
        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.concat_outer(&[a, bad]).is_err());
    }

    #[test]
    fn second_order_requires_differentiable_inner() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let f = g.mul(x, x).unwrap();
        let inner = g.backward(f, &[("x", x)], BackwardMode::Values).unwrap();
        assert!(matches!(
            g.backward_through_gradients(f, &inner, &[("x", x)]),
            Err(Error::NotDifferentiable)
        ));
    }

    #[test]
    fn meta_objective_independent_of_leaf_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let w = g.leaf(Tensor::scalar(5.0));
        let f = g.mul(w, w).unwrap();
        let inner = g.backward(f, &[("w", w)], BackwardMode::Differentiable).unwrap();
        let df = inner.entries()[0].node.unwrap();
        let meta = g.mul(df, df).unwrap();
        let outer = g.backward_through_gradients(meta, &inner, &[("x", x)]).unwrap();
        assert_eq!(outer.get("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn stable_softplus_and_sigmoid() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }
}
