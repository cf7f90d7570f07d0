//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Backward rules are themselves expressed with graph operations, so calling
//! [`Graph::grad`] with `create_graph = true` yields gradients that can be
//! differentiated again (needed for gradient penalties). Convolutions are the
//! exception: their gradients are first-order only.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::tensor::{self, broadcast_shapes, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Sqrt(usize),
    RecipSafe(usize),
    Clamp(usize, f64, f64),
    LeakyRelu(usize, f64),
    MatMul(usize, usize, bool, bool),
    SumTo(usize),
    BroadcastTo(usize),
    Reshape(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Embed { x: usize, axis: usize, start: usize },
    Concat(Vec<usize>, usize),
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    ConvTranspose2d { x: usize, w: usize, b: usize, geom: ConvGeom },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b, _, _) => vec![*a, *b],
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Tanh(a) | Sigmoid(a) | Softplus(a)
            | Square(a) | Sqrt(a) | RecipSafe(a) | Clamp(a, _, _) | LeakyRelu(a, _) | SumTo(a) | BroadcastTo(a) | Reshape(a) => {
                vec![*a]
            }
            Narrow { x, .. } | Embed { x, .. } => vec![*x],
            Concat(xs, _) => xs.clone(),
            Conv2d { x, w, b, .. } | ConvTranspose2d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations. Build one per forward/backward computation.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    tracking: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), tracking: Cell::new(true) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), op, requires_grad: requires_grad && self.tracking.get() });
        Var { graph: self, id }
    }

    /// A differentiable leaf (a trainable parameter or an input to differentiate against).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad: true });
        Var { graph: self, id }
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let va = self.value(a);
        let out = f(&va);
        self.push(out, op, self.requires(a))
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'_> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = f(&va, &vb);
        self.push(out, op, self.requires(a) || self.requires(b))
    }

    /// Concatenate along `axis`.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
        let out = concat_values(&values, axis);
        let req = parts.iter().any(|p| self.requires(p.id));
        self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), req)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph`, the returned gradients are themselves differentiable.
    /// Inputs that `output` does not depend on receive zero gradients.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>], create_graph: bool) -> Vec<Var<'g>> {
        assert_eq!(self.value(output.id).len(), 1, "grad() needs a scalar output");
        let n = output.id + 1;
        let (ops, requires): (Vec<Op>, Vec<bool>) = {
            let nodes = self.nodes.borrow();
            nodes[..n].iter().map(|nd| (nd.op.clone(), nd.requires_grad)).unzip()
        };
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n {
                relevant[w.id] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && requires[i] && ops[i].inputs().iter().any(|&j| relevant[j]) {
                relevant[i] = true;
            }
        }

        let saved = self.tracking.get();
        self.tracking.set(saved && create_graph);
        let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
        grads[output.id] = Some(self.constant(Tensor::ones(self.value(output.id).shape())));
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !relevant[i] || matches!(ops[i], Op::Leaf) {
                continue;
            }
            for (input, gi) in self.backward_rule(i, &ops[i], g, &relevant) {
                grads[input] = Some(match grads[input] {
                    Some(prev) => prev.add(gi),
                    None => gi,
                });
            }
        }
        self.tracking.set(saved);

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(self.value(w.id).shape())),
            })
            .collect()
    }

    /// Input gradients of node `id` given its output gradient `g`.
    fn backward_rule<'g>(&'g self, id: usize, op: &Op, g: Var<'g>, relevant: &[bool]) -> Vec<(usize, Var<'g>)> {
        let var = |i: usize| Var { graph: self, id: i };
        let shape = |i: usize| self.value(i).shape().to_vec();
        let out = var(id);
        let mut res = Vec::new();
        let mut put = |i: usize, v: Var<'g>| {
            if relevant[i] {
                res.push((i, v));
            }
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                put(a, g.sum_to(&shape(a)));
                put(b, g.sum_to(&shape(b)));
            }
            Op::Sub(a, b) => {
                put(a, g.sum_to(&shape(a)));
                if relevant[b] {
                    put(b, g.neg().sum_to(&shape(b)));
                }
            }
            Op::Mul(a, b) => {
                if relevant[a] {
                    put(a, g.mul(var(b)).sum_to(&shape(a)));
                }
                if relevant[b] {
                    put(b, g.mul(var(a)).sum_to(&shape(b)));
                }
            }
            Op::Div(a, b) => {
                if relevant[a] {
                    put(a, g.div(var(b)).sum_to(&shape(a)));
                }
                if relevant[b] {
                    put(b, g.mul(out).div(var(b)).neg().sum_to(&shape(b)));
                }
            }
            Op::Neg(a) => put(a, g.neg()),
            Op::Scale(a, c) => put(a, g.scale(c)),
            Op::AddScalar(a) => put(a, g),
            Op::Exp(a) => put(a, g.mul(out)),
            Op::Log(a) => put(a, g.div(var(a))),
            Op::Tanh(a) => put(a, g.mul(out.square().neg().add_scalar(1.0))),
            Op::Sigmoid(a) => put(a, g.mul(out.mul(out.neg().add_scalar(1.0)))),
            Op::Softplus(a) => put(a, g.mul(var(a).sigmoid())),
            Op::Square(a) => put(a, g.mul(var(a)).scale(2.0)),
            Op::Sqrt(a) => put(a, g.mul(out.recip_safe()).scale(0.5)),
            Op::RecipSafe(a) => put(a, g.mul(out.square()).neg()),
            Op::Clamp(a, lo, hi) => {
                let mask = self.value(a).map(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                put(a, g.mul(self.constant(mask)));
            }
            Op::LeakyRelu(a, slope) => {
                let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { slope });
                put(a, g.mul(self.constant(mask)));
            }
            Op::MatMul(a, b, ta, tb) => {
                if relevant[a] {
                    let ga = if ta { var(b).matmul_t(g, tb, true) } else { g.matmul_t(var(b), false, !tb) };
                    put(a, ga);
                }
                if relevant[b] {
                    let gb = if tb { g.matmul_t(var(a), true, ta) } else { var(a).matmul_t(g, !ta, false) };
                    put(b, gb);
                }
            }
            Op::SumTo(a) => put(a, g.broadcast_to(&shape(a))),
            Op::BroadcastTo(a) => put(a, g.sum_to(&shape(a))),
            Op::Reshape(a) => put(a, g.reshape(&shape(a))),
            Op::Narrow { x, axis, start } => put(x, g.embed(axis, start, shape(x)[axis])),
            Op::Embed { x, axis, start } => put(x, g.narrow(axis, start, shape(x)[axis])),
            Op::Concat(ref parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let len = shape(p)[axis];
                    if relevant[p] {
                        put(p, g.narrow(axis, offset, len));
                    }
                    offset += len;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                self.assert_first_order(g, "conv2d");
                let grads = conv::conv2d_backward(&self.value(x), &self.value(w), &g.value(), geom, relevant[x]);
                self.put_conv_grads(grads, [x, w, b], &mut put);
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                self.assert_first_order(g, "conv_transpose2d");
                let grads = conv::conv_transpose2d_backward(&self.value(x), &self.value(w), &g.value(), geom, relevant[x]);
                self.put_conv_grads(grads, [x, w, b], &mut put);
            }
        }
        res
    }

    fn put_conv_grads<'g>(
        &'g self,
        (dx, dw, db): (Option<Tensor>, Tensor, Tensor),
        [x, w, b]: [usize; 3],
        put: &mut impl FnMut(usize, Var<'g>),
    ) {
        if let Some(dx) = dx {
            put(x, self.constant(dx));
        }
        put(w, self.constant(dw));
        put(b, self.constant(db));
    }

    fn assert_first_order(&self, g: Var<'_>, what: &str) {
        assert!(
            !(self.tracking.get() && self.requires(g.id)),
            "{what} supports only first-order gradients"
        );
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat_values(values: &[Rc<Tensor>], axis: usize) -> Tensor {
    let first = values[0].shape();
    let mut shape = first.to_vec();
    shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let (outer, _, inner) = split_axis(first, axis);
    let mut data = Vec::with_capacity(tensor::numel(&shape));
    for o in 0..outer {
        for v in values {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            let chunk = s[axis] * inner;
            data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, data)
}

// Named methods rather than operator traits keep chained expressions readable.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// The same value, cut from the graph.
    pub fn detach(&self) -> Var<'g> {
        let v = self.value();
        let g = self.graph;
        let mut nodes = g.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: v, op: Op::Leaf, requires_grad: false });
        Var { graph: g, id }
    }

    pub fn add(self, o: Var<'g>) -> Var<'g> {
        self.graph.binary(self.id, o.id, Op::Add(self.id, o.id), |a, b| tensor::broadcast_zip(a, b, |x, y| x + y))
    }

    pub fn sub(self, o: Var<'g>) -> Var<'g> {
        self.graph.binary(self.id, o.id, Op::Sub(self.id, o.id), |a, b| tensor::broadcast_zip(a, b, |x, y| x - y))
    }

    pub fn mul(self, o: Var<'g>) -> Var<'g> {
        self.graph.binary(self.id, o.id, Op::Mul(self.id, o.id), |a, b| tensor::broadcast_zip(a, b, |x, y| x * y))
    }

    pub fn div(self, o: Var<'g>) -> Var<'g> {
        self.graph.binary(self.id, o.id, Op::Div(self.id, o.id), |a, b| tensor::broadcast_zip(a, b, |x, y| x / y))
    }

    pub fn neg(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Neg(self.id), |a| a.map(|x| -x))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.graph.unary(self.id, Op::Scale(self.id, c), |a| a.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.graph.unary(self.id, Op::AddScalar(self.id), |a| a.map(|x| x + c))
    }

    pub fn exp(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn tanh(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Softplus(self.id), |a| a.map(softplus))
    }

    pub fn square(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Square(self.id), |a| a.map(|x| x * x))
    }

    /// Square root whose derivative at 0 is taken to be 0.
    pub fn sqrt(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Sqrt(self.id), |a| a.map(f64::sqrt))
    }

    /// `1/x`, with 0 mapped to 0.
    pub fn recip_safe(self) -> Var<'g> {
        self.graph.unary(self.id, Op::RecipSafe(self.id), |a| a.map(|x| if x == 0.0 { 0.0 } else { 1.0 / x }))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.graph.unary(self.id, Op::Clamp(self.id, lo, hi), |a| a.map(|x| x.clamp(lo, hi)))
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.graph.unary(self.id, Op::LeakyRelu(self.id, slope), |a| a.map(|x| if x > 0.0 { x } else { slope * x }))
    }

    pub fn matmul(self, o: Var<'g>) -> Var<'g> {
        self.matmul_t(o, false, false)
    }

    /// `op(self) @ op(o)` where `op` optionally transposes.
    pub fn matmul_t(self, o: Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        self.graph
            .binary(self.id, o.id, Op::MatMul(self.id, o.id, ta, tb), |a, b| tensor::matmul(a, b, ta, tb))
    }

    pub fn sum_to(self, shape: &[usize]) -> Var<'g> {
        if self.value().shape() == shape {
            return self;
        }
        self.graph.unary(self.id, Op::SumTo(self.id), |a| tensor::sum_to(a, shape))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g> {
        if self.value().shape() == shape {
            return self;
        }
        let v = self.value();
        assert_eq!(
            broadcast_shapes(v.shape(), shape).as_deref(),
            Some(shape),
            "cannot broadcast {:?} to {shape:?}",
            v.shape()
        );
        self.graph.unary(self.id, Op::BroadcastTo(self.id), |a| tensor::broadcast_to(a, shape))
    }

    pub fn sum(self) -> Var<'g> {
        self.sum_to(&[])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        if self.value().shape() == shape {
            return self;
        }
        self.graph.unary(self.id, Op::Reshape(self.id), |a| a.clone().reshape(shape))
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value();
        if start == 0 && v.shape()[axis] == len {
            return self;
        }
        let (outer, alen, inner) = split_axis(v.shape(), axis);
        assert!(start + len <= alen, "narrow out of range");
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        drop(v);
        self.graph.push(Tensor::new(&shape, data), Op::Narrow { x: self.id, axis, start }, self.requires_grad())
    }

    /// Place `self` at `start` along `axis` inside zeros of length `full`; adjoint of [`Var::narrow`].
    pub fn embed(self, axis: usize, start: usize, full: usize) -> Var<'g> {
        let v = self.value();
        let (outer, len, inner) = split_axis(v.shape(), axis);
        if start == 0 && len == full {
            return self;
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = full;
        let mut data = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            data[dst..dst + len * inner].copy_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
        drop(v);
        self.graph.push(Tensor::new(&shape, data), Op::Embed { x: self.id, axis, start }, self.requires_grad())
    }

    /// NHWC convolution with weight `[k*k*c_in, c_out]` and bias `[c_out]`.
    pub fn conv2d(self, w: Var<'g>, b: Var<'g>, geom: ConvGeom) -> Var<'g> {
        let g = self.graph;
        let out = conv::conv2d(&self.value(), &w.value(), &b.value(), geom);
        let req = self.requires_grad() || w.requires_grad() || b.requires_grad();
        g.push(out, Op::Conv2d { x: self.id, w: w.id, b: b.id, geom }, req)
    }

    /// NHWC transposed convolution with weight `[k*k*c_out, c_in]` and bias `[c_out]`.
    pub fn conv_transpose2d(self, w: Var<'g>, b: Var<'g>, geom: ConvGeom, out_pad: usize) -> Var<'g> {
        let g = self.graph;
        let out = conv::conv_transpose2d(&self.value(), &w.value(), &b.value(), geom, out_pad);
        let req = self.requires_grad() || w.requires_grad() || b.requires_grad();
        g.push(out, Op::ConvTranspose2d { x: self.id, w: w.id, b: b.id, geom }, req)
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
