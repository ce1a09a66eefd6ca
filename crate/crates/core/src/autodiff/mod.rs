//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its computed value. `Tape::backward`
//! walks the nodes in reverse creation order and expresses each
//! vector-Jacobian product with ordinary tape ops, so with
//! `create_graph = true` the returned gradients are themselves
//! differentiable. That is what lets an outer loss be differentiated
//! through the gradient steps of an unrolled inner training loop.

mod backward;
pub(crate) mod kernels;
pub mod map;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
pub use map::MapSet;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node.
#[derive(Clone, Debug)]
pub enum Op {
    /// Variable or constant; no inputs.
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var, f64),
    /// Multiplies a tensor by a one-element node.
    ScaleBy(Var, Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    SumAxis { x: Var, axis: usize },
    BroadcastAxis { x: Var, axis: usize, size: usize },
    SumAll(Var),
    /// Fills `shape` with the value of a one-element node.
    Expand { x: Var, shape: Vec<usize> },
    Reshape { x: Var, shape: Vec<usize> },
    /// `[a, b, ...] -> [b, a, ...]`
    SwapLeading(Var),
    IndexSelect { x: Var, index: Arc<[usize]> },
    ScatterAdd { x: Var, index: Arc<[usize]>, rows: usize },
    Concat(Vec<Var>),
    Conv2d { x: Var, w: Var },
    Conv2dWeightGrad { x: Var, g: Var },
    ConvFlipT(Var),
    ApplyMap { x: Var, maps: Arc<MapSet>, transpose: bool },
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Arc<[usize]> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "elementwise_mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Powf(..) => "powf",
            Op::SumAxis { .. } => "sum_axis",
            Op::BroadcastAxis { .. } => "broadcast_axis",
            Op::SumAll(_) => "sum_all",
            Op::Expand { .. } => "expand",
            Op::Reshape { .. } => "reshape",
            Op::SwapLeading(_) => "swap_leading",
            Op::IndexSelect { .. } => "index_select",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Concat(_) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::ConvFlipT(_) => "conv_flip_transpose",
            Op::ApplyMap { .. } => "apply_map",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy_mean",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Conv2d { x, w } => vec![*x, *w],
            Op::Conv2dWeightGrad { x, g } => vec![*x, *g],
            Op::ScalarMul(x, _)
            | Op::AddScalar(x, _)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Powf(x, _)
            | Op::SumAll(x)
            | Op::SwapLeading(x)
            | Op::ConvFlipT(x)
            | Op::Softmax(x) => vec![*x],
            Op::SumAxis { x, .. }
            | Op::BroadcastAxis { x, .. }
            | Op::Expand { x, .. }
            | Op::Reshape { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::ApplyMap { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A single-owner computation graph. Node ids follow creation order, which
/// is also a topological order.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims_product(shape: &[usize], from: usize, to: usize) -> usize {
    shape[from..to].iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never carries gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Registers a named variable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.variable(value);
        self.params.insert(name.into(), v);
        v
    }

    pub fn param_named(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Constant copy of a node's current value; gradients do not flow
    /// through the copy.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.try_value(v)?.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Drops every node created after `mark` (a previous `len()`).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.params.retain(|_, v| v.0 < mark);
    }

    /// Runs `f` with gradient tracking disabled: every node created inside
    /// is a constant.
    pub fn no_grad<T>(&mut self, f: impl FnOnce(&mut Tape) -> T) -> T {
        let prev = self.grad_enabled;
        self.grad_enabled = false;
        let out = f(self);
        self.grad_enabled = prev;
        out
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode {
                index: v.0,
                len: self.nodes.len(),
            })
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a node computed by `op`. Fails on invalid shapes or a
    /// non-finite result.
    pub fn apply(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        for &v in &inputs {
            self.check(v)?;
        }
        let value = self.eval(&op)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push(op, value, requires_grad))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let name = op.name();
        match op {
            Op::Leaf => Err(Error::invalid("leaf nodes are created with variable/constant")),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                if av.rank() != 2 || bv.rank() != 2 {
                    return Err(Error::shape(name, format!("{:?} x {:?}", av.shape(), bv.shape())));
                }
                let (ar, ac) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let k_a = if *ta { ar } else { ac };
                let k_b = if *tb { bc } else { br };
                if k_a != k_b {
                    return Err(Error::shape(
                        name,
                        format!("{:?}{} x {:?}{}", av.shape(), if *ta { "ᵀ" } else { "" }, bv.shape(), if *tb { "ᵀ" } else { "" }),
                    ));
                }
                let (m, n, c) = kernels::matmul(av.data(), ar, ac, *ta, bv.data(), br, bc, *tb);
                Tensor::new(vec![m, n], c)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if av.shape() != bv.shape() {
                    return Err(Error::shape(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(av.shape().to_vec(), data)
            }
            Op::ScalarMul(x, c) => Ok(map_values(val(x), |v| v * c)),
            Op::AddScalar(x, c) => Ok(map_values(val(x), |v| v + c)),
            Op::ScaleBy(x, s) => {
                let sv = val(s);
                if sv.len() != 1 {
                    return Err(Error::shape(name, format!("scale must be one element, got {:?}", sv.shape())));
                }
                let c = sv.item();
                Ok(map_values(val(x), |v| v * c))
            }
            Op::Relu(x) => Ok(map_values(val(x), |v| if v > 0.0 { v } else { 0.0 })),
            Op::Exp(x) => Ok(map_values(val(x), libm::exp)),
            Op::Ln(x) => Ok(map_values(val(x), libm::log)),
            Op::Powf(x, p) => Ok(map_values(val(x), |v| libm::pow(v, *p))),
            Op::SumAxis { x, axis } => {
                let xv = val(x);
                let s = xv.shape();
                if *axis >= s.len() {
                    return Err(Error::shape(name, format!("axis {} of {:?}", axis, s)));
                }
                let (outer, n, inner) = (dims_product(s, 0, *axis), s[*axis], dims_product(s, axis + 1, s.len()));
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let src = &xv.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                }
                let mut shape = s.to_vec();
                shape[*axis] = 1;
                Tensor::new(shape, out)
            }
            Op::BroadcastAxis { x, axis, size } => {
                let xv = val(x);
                let s = xv.shape();
                if *axis >= s.len() || s[*axis] != 1 {
                    return Err(Error::shape(name, format!("axis {} of {:?} must have size 1", axis, s)));
                }
                let (outer, inner) = (dims_product(s, 0, *axis), dims_product(s, axis + 1, s.len()));
                let mut out = Vec::with_capacity(outer * size * inner);
                for o in 0..outer {
                    let src = &xv.data()[o * inner..(o + 1) * inner];
                    for _ in 0..*size {
                        out.extend_from_slice(src);
                    }
                }
                let mut shape = s.to_vec();
                shape[*axis] = *size;
                Tensor::new(shape, out)
            }
            Op::SumAll(x) => Ok(Tensor::scalar(val(x).sum())),
            Op::Expand { x, shape } => {
                let xv = val(x);
                if xv.len() != 1 {
                    return Err(Error::shape(name, format!("expects one element, got {:?}", xv.shape())));
                }
                Ok(Tensor::full(shape.clone(), xv.item()))
            }
            Op::Reshape { x, shape } => val(x).clone().reshape(shape.clone()).map_err(|_| {
                Error::shape(name, format!("{:?} -> {:?}", val(x).shape(), shape))
            }),
            Op::SwapLeading(x) => {
                let xv = val(x);
                let s = xv.shape();
                if s.len() < 2 {
                    return Err(Error::shape(name, format!("needs rank >= 2, got {:?}", s)));
                }
                let (a, b, inner) = (s[0], s[1], dims_product(s, 2, s.len()));
                let mut out = Vec::with_capacity(xv.len());
                for j in 0..b {
                    for i in 0..a {
                        out.extend_from_slice(&xv.data()[(i * b + j) * inner..(i * b + j + 1) * inner]);
                    }
                }
                let mut shape = s.to_vec();
                shape.swap(0, 1);
                Tensor::new(shape, out)
            }
            Op::IndexSelect { x, index } => {
                let xv = val(x);
                if xv.rank() == 0 {
                    return Err(Error::shape(name, "cannot index a scalar"));
                }
                let rows = xv.shape()[0];
                let len = numel(&xv.shape()[1..]);
                let mut out = Vec::with_capacity(index.len() * len);
                for &i in index.iter() {
                    if i >= rows {
                        return Err(Error::shape(name, format!("row {} out of {}", i, rows)));
                    }
                    out.extend_from_slice(&xv.data()[i * len..(i + 1) * len]);
                }
                let mut shape = xv.shape().to_vec();
                shape[0] = index.len();
                Tensor::new(shape, out)
            }
            Op::ScatterAdd { x, index, rows } => {
                let xv = val(x);
                if xv.rank() == 0 || xv.shape()[0] != index.len() {
                    return Err(Error::shape(name, format!("{:?} with {} indices", xv.shape(), index.len())));
                }
                let len = numel(&xv.shape()[1..]);
                let mut out = vec![0.0; rows * len];
                for (k, &i) in index.iter().enumerate() {
                    if i >= *rows {
                        return Err(Error::shape(name, format!("row {} out of {}", i, rows)));
                    }
                    let src = &xv.data()[k * len..(k + 1) * len];
                    out[i * len..(i + 1) * len].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                }
                let mut shape = xv.shape().to_vec();
                shape[0] = *rows;
                Tensor::new(shape, out)
            }
            Op::Concat(xs) => {
                let first = val(xs.first().ok_or(Error::Empty("concat"))?);
                if first.rank() == 0 {
                    return Err(Error::shape(name, "cannot concatenate scalars"));
                }
                let tail = &first.shape()[1..];
                let mut rows = 0;
                let mut out = Vec::new();
                for v in xs {
                    let t = val(v);
                    if t.rank() == 0 || &t.shape()[1..] != tail {
                        return Err(Error::shape(name, format!("{:?} vs {:?}", first.shape(), t.shape())));
                    }
                    rows += t.shape()[0];
                    out.extend_from_slice(t.data());
                }
                let mut shape = first.shape().to_vec();
                shape[0] = rows;
                Tensor::new(shape, out)
            }
            Op::Conv2d { x, w } => {
                let (xv, wv) = (val(x), val(w));
                let (xs, ws) = (xv.shape(), wv.shape());
                if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] {
                    return Err(Error::shape(name, format!("input {:?}, kernel {:?}", xs, ws)));
                }
                let out = kernels::conv2d(xv.data(), xs[0], xs[1], xs[2], xs[3], wv.data(), ws[0]);
                Tensor::new(vec![xs[0], ws[0], xs[2], xs[3]], out)
            }
            Op::Conv2dWeightGrad { x, g } => {
                let (xv, gv) = (val(x), val(g));
                let (xs, gs) = (xv.shape(), gv.shape());
                if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] || xs[2] != gs[2] || xs[3] != gs[3] {
                    return Err(Error::shape(name, format!("input {:?}, output grad {:?}", xs, gs)));
                }
                let out = kernels::conv2d_weight_grad(xv.data(), gv.data(), xs[0], xs[1], gs[1], xs[2], xs[3]);
                Tensor::new(vec![gs[1], xs[1], 3, 3], out)
            }
            Op::ConvFlipT(w) => {
                let wv = val(w);
                let s = wv.shape();
                if s.len() != 4 || s[2] != 3 || s[3] != 3 {
                    return Err(Error::shape(name, format!("kernel {:?}", s)));
                }
                Tensor::new(vec![s[1], s[0], 3, 3], kernels::conv_flip_transpose(wv.data(), s[0], s[1]))
            }
            Op::ApplyMap { x, maps, transpose } => {
                let xv = val(x);
                let s = xv.shape();
                let (src, dst) = if *transpose {
                    (maps.out_plane, maps.in_plane)
                } else {
                    (maps.in_plane, maps.out_plane)
                };
                if s.len() < 2 || s[s.len() - 2..] != src {
                    return Err(Error::shape(name, format!("{:?} does not end with plane {:?}", s, src)));
                }
                let planes = dims_product(s, 0, s.len() - 2);
                if maps.maps.len() > 1 && planes != maps.maps.len() * maps.group {
                    return Err(Error::shape(
                        name,
                        format!("{} planes for {} per-sample maps of {} planes", planes, maps.maps.len(), maps.group),
                    ));
                }
                let out = maps.apply(xv.data(), planes, *transpose);
                let mut shape = s[..s.len() - 2].to_vec();
                shape.extend_from_slice(&dst);
                Tensor::new(shape, out)
            }
            Op::Softmax(x) => {
                let xv = val(x);
                if xv.rank() != 2 {
                    return Err(Error::shape(name, format!("expects [batch, classes], got {:?}", xv.shape())));
                }
                let cols = xv.shape()[1];
                let mut out = Vec::with_capacity(xv.len());
                for row in xv.data().chunks_exact(cols) {
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let start = out.len();
                    out.extend(row.iter().map(|&v| libm::exp(v - m)));
                    let z: f64 = out[start..].iter().sum();
                    out[start..].iter_mut().for_each(|v| *v /= z);
                }
                Tensor::new(xv.shape().to_vec(), out)
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let xv = val(logits);
                if xv.rank() != 2 || xv.shape()[0] != labels.len() || labels.is_empty() {
                    return Err(Error::shape(name, format!("logits {:?} with {} labels", xv.shape(), labels.len())));
                }
                let cols = xv.shape()[1];
                let mut total = 0.0;
                for (row, &y) in xv.data().chunks_exact(cols).zip(labels.iter()) {
                    if y >= cols {
                        return Err(Error::shape(name, format!("label {} with {} classes", y, cols)));
                    }
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let lse = m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
                    total += lse - row[y];
                }
                Ok(Tensor::scalar(total / labels.len() as f64))
            }
        }
    }
}

fn map_values(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_fn(t.shape().to_vec(), |i| f(t.data()[i]))
}

/// Convenience constructors for every op. All of them go through
/// [`Tape::apply`].
impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul { a, b, ta: false, tb: false })
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.apply(Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::ScalarMul(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(x, c))
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(Op::ScaleBy(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Ln(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.apply(Op::Powf(x, p))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::SumAxis { x, axis })
    }

    pub fn broadcast_axis(&mut self, x: Var, axis: usize, size: usize) -> Result<Var> {
        self.apply(Op::BroadcastAxis { x, axis, size })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.try_value(x)?.len() as f64;
        let s = self.sum_all(x)?;
        self.scalar_mul(s, 1.0 / n)
    }

    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Expand { x, shape: shape.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { x, shape: shape.to_vec() })
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.try_value(x)?.shape();
        let lead = s.first().copied().unwrap_or(1);
        let rest = numel(s) / lead.max(1);
        self.reshape(x, &[lead, rest])
    }

    pub fn swap_leading(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SwapLeading(x))
    }

    pub fn index_select(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.apply(Op::IndexSelect { x, index: Arc::from(index) })
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Op::Concat(xs.to_vec()))
    }

    /// Adds a length-`n` bias to every row of a `[batch, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.try_value(x)?.shape()[0];
        let n = self.try_value(bias)?.len();
        let b = self.reshape(bias, &[1, n])?;
        let b = self.broadcast_axis(b, 0, rows)?;
        self.add(x, b)
    }

    /// `x · W + b` for `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// 3×3, stride 1, zero-padding 1 convolution without bias.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        self.apply(Op::Conv2d { x, w })
    }

    /// Per-plane normalization over the spatial dims with `eps` added to the
    /// variance. Built from primitive ops so any derivative order is exact.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.try_value(x)?.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("instance_norm", format!("expects NCHW, got {:?}", s)));
        }
        let (planes, hw) = (s[0] * s[1], s[2] * s[3]);
        let flat = self.reshape(x, &[planes, hw])?;
        let sum = self.sum_axis(flat, 1)?;
        let mean = self.scalar_mul(sum, 1.0 / hw as f64)?;
        let mean = self.broadcast_axis(mean, 1, hw)?;
        let centered = self.sub(flat, mean)?;
        let sq = self.mul(centered, centered)?;
        let var = self.sum_axis(sq, 1)?;
        let var = self.scalar_mul(var, 1.0 / hw as f64)?;
        let var = self.add_scalar(var, eps)?;
        let inv_std = self.powf(var, -0.5)?;
        let inv_std = self.broadcast_axis(inv_std, 1, hw)?;
        let y = self.mul(centered, inv_std)?;
        self.reshape(y, &s)
    }

    pub fn apply_map(&mut self, x: Var, maps: Arc<MapSet>) -> Result<Var> {
        self.apply(Op::ApplyMap { x, maps, transpose: false })
    }

    /// 2×2 average pooling over the last two dims (odd sizes floor).
    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.try_value(x)?.shape();
        if s.len() < 2 {
            return Err(Error::shape("avg_pool2d", format!("needs a plane, got {:?}", s)));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h < 2 || w < 2 {
            return Err(Error::shape("avg_pool2d", format!("plane {}x{} is smaller than 2x2", h, w)));
        }
        let maps = MapSet::shared([h, w], [h / 2, w / 2], map::avg_pool2x2_map(h, w));
        self.apply_map(x, Arc::new(maps))
    }

    /// Bilinear ×2 upsampling over the last two dims.
    pub fn bilinear_upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.try_value(x)?.shape();
        if s.len() < 2 || s[s.len() - 2] == 0 || s[s.len() - 1] == 0 {
            return Err(Error::shape("bilinear_upsample2x", format!("needs a non-empty plane, got {:?}", s)));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let maps = MapSet::shared([h, w], [2 * h, 2 * w], map::upsample2x_map(h, w));
        self.apply_map(x, Arc::new(maps))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax(x))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against hard
    /// labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(Op::SoftmaxCrossEntropy { logits, labels: Arc::from(labels) })
    }
}
