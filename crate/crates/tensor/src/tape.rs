//! Recording tape and reverse traversal.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. Node ids increase in execution order, so walking
//! the node list from the loss downwards visits ops in exact reverse order.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use crate::error::{invalid, Result};
use crate::gather::GatherMap;
use crate::sparse::{CoordSet, Rulebook};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Storage precision of op outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    /// Full 64-bit values; required for gradient checks.
    #[default]
    F64,
    /// Every op output is rounded to the nearest 32-bit float.
    F32,
}

/// User-defined differentiable op.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient of the output, and returns one optional gradient per input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;

    /// Discrete branch choices taken by the forward pass (argmax winners,
    /// signs at kinks). Empty for smooth ops.
    fn branches(&self, _inputs: &[&Tensor]) -> Vec<i64> {
        Vec::new()
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRows(Var, Var),
    AddRowVector(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LogTf(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AvgPool2d(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Gather(Var, Rc<GatherMap>),
    SparseConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        rules: Rc<Rulebook>,
    },
    Trilinear {
        vol: Var,
        pts: Var,
        coords: Rc<CoordSet>,
    },
    Sum(Var),
    Mean(Var),
    Custom(Vec<Var>, Rc<dyn CustomOp>),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    precision: Precision,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("precision", &self.precision)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Copies the value of `x` into a fresh constant leaf. Gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
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

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        self.round(&mut value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn round(&self, value: &mut Tensor) {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    pub(crate) fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        self.round(&mut value);
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies a user-defined op.
    pub fn custom(&mut self, inputs: &[Var], op: Rc<dyn CustomOp>) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        Ok(self.push(out, Op::Custom(inputs.to_vec(), op), inputs))
    }

    /// Hash of every discrete branch taken by non-smooth ops on this tape:
    /// relu and clamp regions, the sign at the log transform's kink, the
    /// trilinear cell of every sample point and custom op branches. Two
    /// evaluations of the same graph with equal signatures lie on the same
    /// smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Relu(x) | Op::LogTf(x) => {
                    i.hash(&mut h);
                    val(x).data().iter().for_each(|a| (*a > 0.0, *a < 0.0).hash(&mut h));
                }
                Op::Clamp(x, lo, hi) => {
                    i.hash(&mut h);
                    val(x).data().iter().for_each(|a| (*a < *lo, *a > *hi).hash(&mut h));
                }
                Op::Trilinear { pts, .. } => {
                    i.hash(&mut h);
                    val(pts).data().iter().for_each(|a| (a.floor() as i64).hash(&mut h));
                }
                Op::Custom(inputs, op) => {
                    let values: Vec<&Tensor> = inputs.iter().map(val).collect();
                    i.hash(&mut h);
                    op.branches(&values).hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if value.len() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            ));
        }
        self.backward_with(loss, Tensor::new(value.shape().to_vec(), vec![1.0])?)
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return invalid("seed gradient shape differs from output shape");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        let shape = self.shape(v).to_vec();
        self.accumulate(grads, v, Tensor::new(shape, data).expect("gradient shape"));
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate_data(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    self.accumulate_data(grads, *a, gd.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate_data(grads, *b, gd.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::MulRows(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s).data();
                let c = xv.cols();
                if self.requires_grad(*x) {
                    let d = gd
                        .iter()
                        .enumerate()
                        .map(|(k, g)| g * sv[k / c])
                        .collect();
                    self.accumulate_data(grads, *x, d);
                }
                if self.requires_grad(*s) {
                    let mut d = vec![0.0; sv.len()];
                    for (k, (g, x)) in gd.iter().zip(xv.data()).enumerate() {
                        d[k / c] += g * x;
                    }
                    self.accumulate_data(grads, *s, d);
                }
            }
            Op::AddRowVector(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let c = self.value(*b).len();
                    let mut d = vec![0.0; c];
                    for (k, g) in gd.iter().enumerate() {
                        d[k % c] += g;
                    }
                    self.accumulate_data(grads, *b, d);
                }
            }
            Op::Affine(x, scale) => {
                self.accumulate_data(grads, *x, gd.iter().map(|g| g * scale).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate_data(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate_data(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate_data(grads, *x, d);
            }
            Op::LogTf(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| g / ((1.0 + x.abs()) * std::f64::consts::LN_2))
                    .collect();
                self.accumulate_data(grads, *x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x < *lo || *x > *hi { 0.0 } else { *g })
                    .collect();
                self.accumulate_data(grads, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut d = vec![0.0; gd.len()];
                for r in 0..out.rows() {
                    let y = &out.data()[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for k in 0..c {
                        d[r * c + k] = y[k] * (gr[k] - dot);
                    }
                }
                self.accumulate_data(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = crate::dense::linear_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate_data(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate_data(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate_data(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = crate::dense::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate_data(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate_data(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate_data(grads, *b, db);
                }
            }
            Op::AvgPool2d(x, k) => {
                let d = crate::dense::avg_pool2d_backward(self.value(*x).shape(), g, *k);
                self.accumulate_data(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(out.rows() * pc);
                        for r in 0..out.rows() {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + pc]);
                        }
                        self.accumulate_data(grads, *p, d);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.requires_grad(*p) {
                        self.accumulate_data(grads, *p, gd[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                self.accumulate_data(grads, *x, gd.to_vec());
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![0.0; gd.len()];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate_data(grads, *x, d);
            }
            Op::Gather(x, map) => {
                let d = map.backward(self.value(*x).rows(), g);
                self.accumulate_data(grads, *x, d);
            }
            Op::SparseConv { x, w, b, rules } => {
                let (dx, dw, db) = crate::sparse::sparse_conv_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    rules,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate_data(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate_data(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate_data(grads, *b, db);
                }
            }
            Op::Trilinear { vol, pts, coords } => {
                let (dvol, dpts) = crate::sparse::trilinear_backward(
                    self.value(*vol),
                    self.value(*pts),
                    coords,
                    g,
                    self.requires_grad(*vol),
                    self.requires_grad(*pts),
                );
                if let Some(d) = dvol {
                    self.accumulate_data(grads, *vol, d);
                }
                if let Some(d) = dpts {
                    self.accumulate_data(grads, *pts, d);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate_data(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = if n == 0 { 0.0 } else { gd[0] / n as f64 };
                self.accumulate_data(grads, *x, vec![v; n]);
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let ds = op.backward(&values, out, g);
                for (v, d) in inputs.iter().zip(ds) {
                    if let Some(d) = d {
                        self.accumulate(grads, *v, d);
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
