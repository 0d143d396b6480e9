//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node whose parents
//! were pushed earlier, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Binary elementwise ops accept two shapes only: identical shapes, or one
//! operand holding a single value (scalar-tensor). Anything else is a
//! [`Error::Shape`] naming the op.
//!
//! Ops whose backward is not the derivative of their forward (straight-through
//! estimators) are built with [`register_custom_grad`] and applied with
//! [`Graph::apply`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type ForwardFn = dyn Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync;
type BackwardFn = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync;

/// An op with a user-supplied backward rule.
///
/// `backward(inputs, output, upstream)` must return one gradient per input,
/// each shaped like that input.
#[derive(Clone)]
pub struct CustomOp {
    name: Arc<str>,
    forward: Arc<ForwardFn>,
    backward: Arc<BackwardFn>,
}

impl std::fmt::Debug for CustomOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CustomOp")
            .field("name", &self.name)
            .finish()
    }
}

impl CustomOp {
    pub fn name(&self) -> &str {
        &self.name
    }
}

pub fn register_custom_grad<F, B>(name: &str, forward: F, backward: B) -> CustomOp
where
    F: Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync + 'static,
    B: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync + 'static,
{
    CustomOp {
        name: Arc::from(name),
        forward: Arc::new(forward),
        backward: Arc::new(backward),
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Square(Var),
    Clip(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    MulCols(Var, Var),
    ExpandGroups(Var, usize),
    Stack(Vec<Var>),
    Index(Var, usize),
    Softmax(Var),
    SoftmaxCrossEntropy(Var, Arc<[usize]>, Tensor),
    Standardize(Var, f64),
    Custom(CustomOp, Vec<Var>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Clip(..) => "clip",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::MulRows(..) => "mul_rows",
            Op::MulCols(..) => "mul_cols",
            Op::ExpandGroups(..) => "expand_groups",
            Op::Stack(..) => "stack",
            Op::Index(..) => "index",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::Standardize(..) => "standardize",
            Op::Custom(op, _) => op.name(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    scope: Option<Arc<str>>,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    scope: Option<Arc<str>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Scalar gradient shortcut for one-element leaves.
    pub fn scalar(&self, v: Var) -> f64 {
        self.grads[v.0].as_ref().map_or(0.0, |g| g.sum())
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })
    }
}

fn binary(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let x = if a.is_scalar() {
                a.data()[0]
            } else {
                a.data()[i]
            };
            let y = if b.is_scalar() {
                b.data()[0]
            } else {
                b.data()[i]
            };
            f(x, y)
        })
        .collect();
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Reduce an upstream gradient to the shape of an operand that may have been
/// broadcast from a single value.
fn unbroadcast(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        let mut t = Tensor::zeros(target.shape());
        t.data_mut()[0] = grad.sum();
        t
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Label subsequent nodes with `scope` (a layer name) for diagnostics.
    pub fn set_scope(&mut self, scope: Option<&str>) {
        self.scope = scope.map(Arc::from);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.scope.clone(),
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// First node (in construction order) holding a non-finite value, as
    /// `(scope, op name)`.
    pub fn first_non_finite(&self) -> Option<(String, String)> {
        self.nodes.iter().find(|n| !n.value.is_finite()).map(|n| {
            (
                n.scope.as_deref().unwrap_or("<none>").to_string(),
                n.op.name().to_string(),
            )
        })
    }

    /// Number of nodes produced by the op called `name`.
    pub fn count_ops(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape("add", x, y)?;
        let out = binary(x, y, shape, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape("sub", x, y)?;
        let out = binary(x, y, shape, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape("mul", x, y)?;
        let out = binary(x, y, shape, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape("div", x, y)?;
        let out = binary(x, y, shape, |p, q| p / q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| -v);
        let rg = self.rg(a);
        self.push(out, Op::Neg(a), rg)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| k * v);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    /// Add a constant.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    /// Clamp to `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clip(a, lo, hi), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// `[n, m] + [m]`, adding the row vector to every row.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(m), self.value(row));
        if x.shape().len() != 2 || r.len() != x.shape()[1] {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("{:?} + {:?}", x.shape(), r.shape()),
            });
        }
        let cols = x.shape()[1];
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % cols];
        }
        let rg = self.rg(m) || self.rg(row);
        Ok(self.push(out, Op::AddRow(m, row), rg))
    }

    /// `[r, c] * [r]`, scaling row `i` by `scale[i]`.
    pub fn mul_rows(&mut self, m: Var, scale: Var) -> Result<Var> {
        let (x, s) = (self.value(m), self.value(scale));
        if x.shape().len() != 2 || s.len() != x.shape()[0] {
            return Err(Error::Shape {
                op: "mul_rows",
                detail: format!("{:?} * {:?}", x.shape(), s.shape()),
            });
        }
        let cols = x.shape()[1];
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= s.data()[i / cols];
        }
        let rg = self.rg(m) || self.rg(scale);
        Ok(self.push(out, Op::MulRows(m, scale), rg))
    }

    /// `[r, c] * [c]`, scaling column `j` by `scale[j]`.
    pub fn mul_cols(&mut self, m: Var, scale: Var) -> Result<Var> {
        let (x, s) = (self.value(m), self.value(scale));
        if x.shape().len() != 2 || s.len() != x.shape()[1] {
            return Err(Error::Shape {
                op: "mul_cols",
                detail: format!("{:?} * {:?}", x.shape(), s.shape()),
            });
        }
        let cols = x.shape()[1];
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= s.data()[i % cols];
        }
        let rg = self.rg(m) || self.rg(scale);
        Ok(self.push(out, Op::MulCols(m, scale), rg))
    }

    /// Repeat each entry of a `[G]` vector over a block of `group_size`
    /// positions, truncated to `len`.
    pub fn expand_groups(&mut self, g: Var, group_size: usize, len: usize) -> Result<Var> {
        let v = self.value(g);
        if group_size == 0 || v.len() != len.div_ceil(group_size) {
            return Err(Error::Shape {
                op: "expand_groups",
                detail: format!("{} groups of {group_size} for length {len}", v.len()),
            });
        }
        let data = (0..len).map(|i| v.data()[i / group_size]).collect();
        let rg = self.rg(g);
        Ok(self.push(Tensor::vector(data), Op::ExpandGroups(g, group_size), rg))
    }

    /// Concatenate single-value nodes into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Shape {
                op: "stack",
                detail: "no inputs".into(),
            });
        }
        let mut data = Vec::with_capacity(items.len());
        for &v in items {
            let t = self.value(v);
            if !t.is_scalar() {
                return Err(Error::Shape {
                    op: "stack",
                    detail: format!("non-scalar input {:?}", t.shape()),
                });
            }
            data.push(t.item());
        }
        let rg = items.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::vector(data), Op::Stack(items.to_vec()), rg))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(Error::Shape {
                op: "index",
                detail: format!("index {i} of {:?}", t.shape()),
            });
        }
        let out = Tensor::scalar(t.data()[i]);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Index(a, i), rg))
    }

    /// Softmax over all entries of `a`.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = t.map(|v| (v - m).exp());
        let z = e.sum();
        let out = e.map(|v| v / z);
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Mean cross-entropy of row-wise softmax over `[n, c]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?} with {} labels", t.shape(), labels.len()),
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} for {c} classes"),
            });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[label];
        }
        let probs = Tensor::matrix(n, c, probs)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy(logits, Arc::from(labels), probs),
            rg,
        ))
    }

    /// Shift and scale all entries to zero mean and unit variance.
    pub fn standardize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mu = t.mean();
        let var = t.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t.len() as f64;
        let sd = (var + 1e-12).sqrt();
        let out = t.map(|v| (v - mu) / sd);
        let rg = self.rg(a);
        self.push(out, Op::Standardize(a, sd), rg)
    }

    /// Apply a custom op. The backward rule is probed with a zero upstream
    /// gradient so that arity or shape errors surface here rather than in
    /// the middle of a backward pass.
    pub fn apply(&mut self, op: &CustomOp, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = (op.forward)(&values)?;
        let probe = (op.backward)(&values, &out, &Tensor::zeros_like(&out));
        if probe.len() != inputs.len() {
            return Err(Error::BackwardArity {
                op: op.name().to_string(),
                expected: inputs.len(),
                got: probe.len(),
            });
        }
        for (g, x) in probe.iter().zip(&values) {
            if g.shape() != x.shape() {
                return Err(Error::Shape {
                    op: "custom backward",
                    detail: format!(
                        "`{}` gradient {:?} for input {:?}",
                        op.name(),
                        g.shape(),
                        x.shape()
                    ),
                });
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Custom(op.clone(), inputs.to_vec()), rg))
    }

    /// Reverse sweep from a single-value root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(up) = grads[id].take() else { continue };
            self.propagate(node, &up, &mut grads);
            grads[id] = Some(up);
        }

        grads.resize(self.nodes.len(), None);
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, unbroadcast(up.clone(), val(*a)));
                self.accumulate(grads, *b, unbroadcast(up.clone(), val(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, unbroadcast(up.clone(), val(*a)));
                self.accumulate(grads, *b, unbroadcast(up.map(|v| -v), val(*b)));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = binary(up, y, up.shape().to_vec(), |u, q| u * q);
                let gb = binary(up, x, up.shape().to_vec(), |u, p| u * p);
                self.accumulate(grads, *a, unbroadcast(ga, x));
                self.accumulate(grads, *b, unbroadcast(gb, y));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = binary(up, y, up.shape().to_vec(), |u, q| u / q);
                let quot = &node.value;
                let gb = binary(
                    &binary(up, quot, up.shape().to_vec(), |u, o| u * o),
                    y,
                    up.shape().to_vec(),
                    |uo, q| -uo / q,
                );
                self.accumulate(grads, *a, unbroadcast(ga, x));
                self.accumulate(grads, *b, unbroadcast(gb, y));
            }
            Op::Neg(a) => self.accumulate(grads, *a, up.map(|v| -v)),
            Op::Scale(a, k) => self.accumulate(grads, *a, up.map(|v| k * v)),
            Op::Offset(a) => self.accumulate(grads, *a, up.clone()),
            Op::Sum(a) => {
                let u = up.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), u));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let u = up.item() / x.len() as f64;
                self.accumulate(grads, *a, Tensor::full(x.shape(), u));
            }
            Op::Sigmoid(a) => {
                let g = up.zip_map(&node.value, |u, s| u * s * (1.0 - s)).unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::Exp(a) => {
                let g = up.zip_map(&node.value, |u, e| u * e).unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::Ln(a) => {
                let g = up.zip_map(val(*a), |u, x| u / x).unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::Relu(a) => {
                let g = up
                    .zip_map(val(*a), |u, x| if x > 0.0 { u } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::Square(a) => {
                let g = up.zip_map(val(*a), |u, x| 2.0 * u * x).unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::Clip(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let g = up
                    .zip_map(val(*a), |u, x| if x >= lo && x <= hi { u } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = up.matmul(&y.transpose().unwrap()).unwrap();
                let gb = x.transpose().unwrap().matmul(up).unwrap();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, up.transpose().unwrap()),
            Op::AddRow(m, row) => {
                let cols = val(*m).shape()[1];
                let mut gr = vec![0.0; cols];
                for (i, u) in up.data().iter().enumerate() {
                    gr[i % cols] += u;
                }
                self.accumulate(grads, *m, up.clone());
                let rshape = val(*row).shape().to_vec();
                self.accumulate(grads, *row, Tensor::new(rshape, gr).unwrap());
            }
            Op::MulRows(m, s) => {
                let (x, sv) = (val(*m), val(*s));
                let cols = x.shape()[1];
                let mut gm = up.clone();
                let mut gs = vec![0.0; sv.len()];
                for (i, g) in gm.data_mut().iter_mut().enumerate() {
                    gs[i / cols] += *g * x.data()[i];
                    *g *= sv.data()[i / cols];
                }
                self.accumulate(grads, *m, gm);
                let sshape = sv.shape().to_vec();
                self.accumulate(grads, *s, Tensor::new(sshape, gs).unwrap());
            }
            Op::MulCols(m, s) => {
                let (x, sv) = (val(*m), val(*s));
                let cols = x.shape()[1];
                let mut gm = up.clone();
                let mut gs = vec![0.0; sv.len()];
                for (i, g) in gm.data_mut().iter_mut().enumerate() {
                    gs[i % cols] += *g * x.data()[i];
                    *g *= sv.data()[i % cols];
                }
                self.accumulate(grads, *m, gm);
                let sshape = sv.shape().to_vec();
                self.accumulate(grads, *s, Tensor::new(sshape, gs).unwrap());
            }
            Op::ExpandGroups(g, size) => {
                let n = val(*g).len();
                let mut gg = vec![0.0; n];
                for (i, u) in up.data().iter().enumerate() {
                    gg[i / size] += u;
                }
                let gshape = val(*g).shape().to_vec();
                self.accumulate(grads, *g, Tensor::new(gshape, gg).unwrap());
            }
            Op::Stack(items) => {
                for (i, &v) in items.iter().enumerate() {
                    let shape = val(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::full(&shape, up.data()[i]));
                }
            }
            Op::Index(a, i) => {
                let mut g = Tensor::zeros(val(*a).shape());
                g.data_mut()[*i] = up.item();
                self.accumulate(grads, *a, g);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let dot: f64 = up.data().iter().zip(y.data()).map(|(u, p)| u * p).sum();
                let g = up.zip_map(y, |u, p| p * (u - dot)).unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::SoftmaxCrossEntropy(logits, labels, probs) => {
                let (n, c) = (probs.shape()[0], probs.shape()[1]);
                let scale = up.item() / n as f64;
                let mut g = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    g.data_mut()[i * c + l] -= 1.0;
                }
                for v in g.data_mut() {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, g);
            }
            Op::Standardize(a, sd) => {
                let y = &node.value;
                let n = y.len() as f64;
                let mean_up = up.sum() / n;
                let mean_uy = up
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(u, v)| u * v)
                    .sum::<f64>()
                    / n;
                let g = up
                    .zip_map(y, |u, yv| (u - mean_up - yv * mean_uy) / sd)
                    .unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = (op.backward)(&values, &node.value, up);
                // Arity was validated in `apply`.
                for (&v, g) in inputs.iter().zip(gs) {
                    self.accumulate(grads, v, g);
                }
            }
        }
    }
}
