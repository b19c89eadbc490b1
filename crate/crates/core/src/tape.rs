//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] owns every value computed through it. Operations return a
//! [`Var`] handle; [`Tape::backward`] sweeps the nodes in reverse and
//! returns the adjoint of every tracked node. The tape is never consumed,
//! so it can be swept again or [replayed](Tape::replay) with new leaf values.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, Pad};
use crate::stencil::Stencil;
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Ln,
    Abs,
    Exp,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// A scalar-valued function with its own gradient rule, recorded as a
/// single tape node. Used for losses whose gradient comes from a solver
/// (e.g. dual potentials) rather than from differentiating each step.
pub trait ScalarMap: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// `f(x)` and `∇f(x)` (same shape as `x`).
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize, bool),
    Scale(usize, f64),
    Offset(usize, f64),
    Sum(usize),
    Mean(usize),
    Gap(usize),
    FullyConnected {
        x: usize,
        w: usize,
        b: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MatMul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        pad: Pad,
    },
    Stencil {
        x: usize,
        stencil: Arc<Stencil>,
        pad: Pad,
    },
    Concat(Vec<usize>),
    Outer(usize, usize),
    Gather {
        a: usize,
        index: Arc<[usize]>,
        shape: Vec<usize>,
    },
    Reshape {
        a: usize,
        shape: Vec<usize>,
    },
    Map {
        a: usize,
        f: Arc<dyn ScalarMap>,
    },
}

impl Op {
    fn operands(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Gap(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Stencil { x: a, .. }
            | Op::Gather { a, .. }
            | Op::Reshape { a, .. }
            | Op::Map { a, .. } => vec![*a],
            Op::Binary(_, a, b, _) | Op::MatMul(a, b) | Op::Outer(a, b) => vec![*a, *b],
            Op::FullyConnected { x, w, b } => vec![*x, *w, *b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
    /// Cached local gradient for `Op::Map`.
    aux: Option<Tensor>,
}

/// Single-threaded recording of a computation graph.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if self.owns(v) {
            Ok(v.index)
        } else {
            Err(Error::invalid("variable belongs to a different tape"))
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert!(self.owns(v), "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.owns(v) && self.nodes[v.index].tracked
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Node {
            op: Op::Leaf,
            value,
            tracked: requires_grad,
            aux: None,
        })
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, aux) = self.eval(&op)?;
        if !value.is_finite() {
            return Err(Error::domain(
                "forward",
                format!(
                    "{:?} produced a non-finite value",
                    std::mem::discriminant(&op)
                ),
            ));
        }
        let tracked = op.operands().iter().any(|&i| self.nodes[i].tracked);
        Ok(self.push_node(Node {
            op,
            value,
            tracked,
            aux,
        }))
    }

    fn v(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn eval(&self, op: &Op) -> Result<(Tensor, Option<Tensor>)> {
        let out = match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Unary(kind, a) => unary_forward(*kind, self.v(*a))?,
            Op::Binary(kind, a, b, _) => {
                let (a, b) = (self.v(*a), self.v(*b));
                let bc = ops::broadcast_kind("elementwise", a, b)?;
                match kind {
                    BinaryKind::Add => ops::binary(a, b, bc, |x, y| x + y),
                    BinaryKind::Sub => ops::binary(a, b, bc, |x, y| x - y),
                    BinaryKind::Mul => ops::binary(a, b, bc, |x, y| x * y),
                    BinaryKind::Div => {
                        if b.data().iter().any(|&y| y == 0.0) {
                            return Err(Error::domain("div", "division by zero"));
                        }
                        ops::binary(a, b, bc, |x, y| x / y)
                    }
                }
            }
            Op::Scale(a, f) => self.v(*a).map(|x| x * f),
            Op::Offset(a, f) => self.v(*a).map(|x| x + f),
            Op::Sum(a) => Tensor::scalar(self.v(*a).sum()),
            Op::Mean(a) => Tensor::scalar(self.v(*a).mean()),
            Op::Gap(a) => ops::gap(self.v(*a))?,
            Op::FullyConnected { x, w, b } => {
                ops::fully_connected(self.v(*x), self.v(*w), self.v(*b))?
            }
            Op::Linear { x, w, b } => linear_forward(self.v(*x), self.v(*w), b.map(|b| self.v(b)))?,
            Op::MatMul(a, b) => ops::matmul(self.v(*a), self.v(*b))?,
            Op::Transpose(a) => ops::transpose(self.v(*a))?,
            Op::SoftmaxRows(a) => ops::softmax_rows(self.v(*a))?,
            Op::Conv2d { x, w, b, pad } => {
                ops::conv2d(self.v(*x), self.v(*w), b.map(|b| self.v(b)), *pad)?
            }
            Op::Stencil { x, stencil, pad } => ops::apply_stencil(self.v(*x), stencil, *pad)?,
            Op::Concat(parts) => {
                let parts: Vec<&Tensor> = parts.iter().map(|&p| self.v(p)).collect();
                ops::concat_channels(&parts)?
            }
            Op::Outer(a, b) => ops::outer_channels(self.v(*a), self.v(*b))?,
            Op::Gather { a, index, shape } => {
                let src = self.v(*a).data();
                if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
                    return Err(Error::shape("gather", format!("index {bad} out of range")));
                }
                Tensor::new(shape.clone(), index.iter().map(|&i| src[i]).collect())?
            }
            Op::Reshape { a, shape } => self.v(*a).reshape(shape)?,
            Op::Map { a, f } => {
                let (value, grad) = f.value_and_grad(self.v(*a))?;
                return Ok((Tensor::scalar(value), Some(grad)));
            }
        };
        Ok((out, None))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Unary(kind, a))
    }

    /// Elementwise binary op. `b` either matches `a` or is a per-channel
    /// vector broadcast over the remaining axes of `a`.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let bc = ops::broadcast_kind("elementwise", self.v(a), self.v(b))?;
        self.record(Op::Binary(kind, a, b, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Offset(a, shift))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Mean(a))
    }

    /// Global average pool over everything but the leading channel axis.
    pub fn gap(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Gap(a))
    }

    /// `W x + b` for a vector `x`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (x, w, b) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        self.record(Op::FullyConnected { x, w, b })
    }

    /// Row-wise affine map: `x: [N,in]`, `w: [in,out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (x, w) = (self.idx(x)?, self.idx(w)?);
        let b = b.map(|b| self.idx(b)).transpose()?;
        self.record(Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::SoftmaxRows(a))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: Pad) -> Result<Var> {
        let (x, w) = (self.idx(x)?, self.idx(w)?);
        let b = b.map(|b| self.idx(b)).transpose()?;
        self.record(Op::Conv2d { x, w, b, pad })
    }

    /// Channel-wise application of a fixed stencil.
    pub fn stencil(&mut self, x: Var, stencil: &Stencil, pad: Pad) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::Stencil {
            x,
            stencil: Arc::new(stencil.clone()),
            pad,
        })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let parts = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        self.record(Op::Concat(parts))
    }

    pub fn outer_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::Outer(a, b))
    }

    /// `out.data[i] = a.data[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Gather {
            a,
            index,
            shape: shape.to_vec(),
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Reshape {
            a,
            shape: shape.to_vec(),
        })
    }

    pub fn map(&mut self, a: Var, f: Arc<dyn ScalarMap>) -> Result<Var> {
        let a = self.idx(a)?;
        self.record(Op::Map { a, f })
    }

    /// Replaces leaf values and recomputes every downstream node in order.
    pub fn replay(&mut self, leaves: &[(Var, Tensor)]) -> Result<()> {
        for (v, t) in leaves {
            let i = self.idx(*v)?;
            if !matches!(self.nodes[i].op, Op::Leaf) {
                return Err(Error::invalid(format!("node {i} is not a leaf")));
            }
            if self.nodes[i].value.shape() != t.shape() {
                return Err(Error::shape(
                    "replay",
                    format!(
                        "leaf {i} is {:?}, got {:?}",
                        self.nodes[i].value.shape(),
                        t.shape()
                    ),
                ));
            }
            self.nodes[i].value = t.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (value, aux) = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be a scalar, got {:?}",
                    self.nodes[root].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), 1.0));
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (operand, contribution) in self.local_grads(node, &g) {
                if !self.nodes[operand].tracked {
                    continue;
                }
                match &mut grads[operand] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Unary(kind, a) => {
                let x = self.v(*a);
                let d = match kind {
                    UnaryKind::Relu => x.zip_map(g, |x, g| if x > 0.0 { g } else { 0.0 }),
                    UnaryKind::Sigmoid => out.zip_map(g, |s, g| g * s * (1.0 - s)),
                    UnaryKind::Ln => x.zip_map(g, |x, g| g / x),
                    UnaryKind::Abs => x.zip_map(g, |x, g| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                    UnaryKind::Exp => out.zip_map(g, |y, g| g * y),
                    UnaryKind::Sqrt => {
                        out.zip_map(g, |y, g| if y > 0.0 { 0.5 * g / y } else { 0.0 })
                    }
                };
                vec![(*a, d.expect("same shape"))]
            }
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let (ga, gb) = match kind {
                    BinaryKind::Add => (g.clone(), g.clone()),
                    BinaryKind::Sub => (g.clone(), g.map(|x| -x)),
                    BinaryKind::Mul => (
                        ops::binary(g, bv, *bc, |g, y| g * y),
                        g.zip_map(av, |g, x| g * x).expect("same shape"),
                    ),
                    BinaryKind::Div => (
                        ops::binary(g, bv, *bc, |g, y| g / y),
                        ops::binary(
                            &g.zip_map(av, |g, x| g * x).expect("same shape"),
                            bv,
                            *bc,
                            |gx, y| -gx / (y * y),
                        ),
                    ),
                };
                let gb = if *bc {
                    ops::reduce_per_channel(&gb, bv.len())
                } else {
                    gb
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::Offset(a, _) => vec![(*a, g.clone())],
            Op::Sum(a) => vec![(*a, Tensor::full(self.v(*a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let n = self.v(*a).len() as f64;
                vec![(*a, Tensor::full(self.v(*a).shape(), g.data()[0] / n))]
            }
            Op::Gap(a) => {
                let x = self.v(*a);
                let inner = x.len() / x.shape()[0];
                let data = (0..x.len())
                    .map(|i| g.data()[i / inner] / inner as f64)
                    .collect();
                vec![(
                    *a,
                    Tensor::new(x.shape().to_vec(), data).expect("same shape"),
                )]
            }
            Op::FullyConnected { x, w, b } => {
                let (xv, wv) = (self.v(*x), self.v(*w));
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                let gx = Tensor::from_fn(&[n], |i| {
                    (0..m).map(|r| wv.data()[r * n + i[0]] * g.data()[r]).sum()
                });
                let gw = Tensor::from_fn(&[m, n], |i| g.data()[i[0]] * xv.data()[i[1]]);
                vec![(*x, gx), (*w, gw), (*b, g.clone())]
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.v(*x), self.v(*w));
                let gx = ops::matmul(g, &ops::transpose(wv).expect("rank 2")).expect("shapes");
                let gw = ops::matmul(&ops::transpose(xv).expect("rank 2"), g).expect("shapes");
                let mut res = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    let (rows, cols) = (g.shape()[0], g.shape()[1]);
                    let gb = Tensor::from_fn(&[cols], |i| {
                        (0..rows).map(|r| g.data()[r * cols + i[0]]).sum()
                    });
                    res.push((*b, gb));
                }
                res
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let ga = ops::matmul(g, &ops::transpose(bv).expect("rank 2")).expect("shapes");
                let gb = ops::matmul(&ops::transpose(av).expect("rank 2"), g).expect("shapes");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, ops::transpose(g).expect("rank 2"))],
            Op::SoftmaxRows(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let s = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let inner: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for c in 0..n {
                        d[r * n + c] = s[c] * (gr[c] - inner);
                    }
                }
                vec![(*a, Tensor::new(vec![m, n], d).expect("same shape"))]
            }
            Op::Conv2d { x, w, b, pad } => {
                let (gx, gw, gb) =
                    ops::conv2d_backward(self.v(*x), self.v(*w), b.is_some(), *pad, g);
                let mut res = vec![(*x, gx), (*w, gw)];
                if let (Some(b), Some(gb)) = (b, gb) {
                    res.push((*b, gb));
                }
                res
            }
            Op::Stencil { x, stencil, pad } => {
                vec![(
                    *x,
                    ops::apply_stencil_backward(self.v(*x).shape(), stencil, *pad, g),
                )]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let shape = self.v(p).shape().to_vec();
                        let n = self.v(p).len();
                        let t = Tensor::new(shape, g.data()[offset..offset + n].to_vec())
                            .expect("same shape");
                        offset += n;
                        (p, t)
                    })
                    .collect()
            }
            Op::Outer(a, b) => {
                let (ga, gb) = ops::outer_channels_backward(self.v(*a), self.v(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Gather { a, index, .. } => {
                let src = self.v(*a);
                let mut d = vec![0.0; src.len()];
                for (o, &i) in index.iter().enumerate() {
                    d[i] += g.data()[o];
                }
                vec![(
                    *a,
                    Tensor::new(src.shape().to_vec(), d).expect("same shape"),
                )]
            }
            Op::Reshape { a, .. } => vec![(*a, g.reshape(self.v(*a).shape()).expect("same size"))],
            Op::Map { a, .. } => {
                let local = node.aux.as_ref().expect("map nodes cache their gradient");
                vec![(*a, local.map(|x| x * g.data()[0]))]
            }
        }
    }
}

fn unary_forward(kind: UnaryKind, x: &Tensor) -> Result<Tensor> {
    Ok(match kind {
        UnaryKind::Relu => x.map(|v| v.max(0.0)),
        UnaryKind::Sigmoid => x.map(sigmoid),
        UnaryKind::Ln => {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::domain(
                    "ln",
                    format!("argument {bad} is not positive"),
                ));
            }
            x.map(f64::ln)
        }
        UnaryKind::Abs => x.map(f64::abs),
        UnaryKind::Exp => x.map(f64::exp),
        UnaryKind::Sqrt => {
            if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
                return Err(Error::domain("sqrt", format!("argument {bad} is negative")));
            }
            x.map(f64::sqrt)
        }
    })
}

/// Logistic function, evaluated without overflow for large |x|.
///
/// The result is clamped into the open interval so that it stays strictly
/// inside (0, 1) even where `exp` saturates.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = ops::matmul(x, w)?;
    if let Some(b) = b {
        let cols = y.shape()[1];
        if b.shape() != [cols] {
            return Err(Error::shape(
                "linear",
                format!("bias must be [{cols}], got {:?}", b.shape()),
            ));
        }
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % cols];
        }
    }
    Ok(y)
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The gradient of the loss with respect to `v`, if `v` lies on the
    /// tape that produced these gradients and the loss depends on it.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::of`], but substitutes zeros of `shape` when no
    /// gradient exists. The flag reports whether a real gradient was found.
    pub fn of_or_zeros(&self, v: Var, shape: &[usize]) -> (Tensor, bool) {
        match self.of(v) {
            Some(g) => (g.clone(), true),
            None => (Tensor::zeros(shape), false),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_reference_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).data(), &[0.5]);
        let m = t.constant(Tensor::scalar(-2.0));
        let r = t.relu(m).unwrap();
        assert_eq!(t.value(r).data(), &[0.0]);
        let a = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn ln_rejects_non_positive_arguments() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(t.ln(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval() {
        for x in [-1e6, -800.0, -40.0, 0.0, 40.0, 800.0, 1e6] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn gradient_of_sum_of_squares_is_twice_input() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.5, -2.0, 0.25]));
        let sq = t.square(x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.of(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn sigmoid_slope_at_zero_is_a_quarter() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let s = t.sigmoid(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.of(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn foreign_variables_get_flagged_zero_gradients() {
        let mut other = Tape::new();
        let stranger = other.param(Tensor::scalar(1.0));
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let y = t.square(x).unwrap();
        let g = t.backward(y).unwrap();
        let (z, found) = g.of_or_zeros(stranger, &[1]);
        assert!(!found);
        assert_eq!(z.data(), &[0.0]);
        assert!(t.add(x, stranger).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let a = t.scale(x, 2.0).unwrap();
        let b = t.mul(x, x).unwrap();
        let c = t.add(a, b).unwrap();
        let g = t.backward(c).unwrap();
        assert_eq!(g.of(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn per_channel_broadcast_reduces_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_fn(&[2, 2, 2], |i| i[2] as f64 + 1.0));
        let w = t.param(Tensor::from_vec(vec![2.0, 3.0]));
        let y = t.mul(x, w).unwrap();
        let loss = t.sum(y).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.of(w).unwrap().data(), &[6.0, 6.0]);
        assert_eq!(
            g.of(x).unwrap().data(),
            &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]
        );
        let bad = t.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(t.mul(x, bad).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![0.3, -1.2, 2.2]));
        let s = t.sigmoid(x).unwrap();
        let e = t.exp(s).unwrap();
        let l = t.mean(e).unwrap();
        let before = t.value(l).clone();
        let x0 = t.value(x).clone();
        t.replay(&[(x, x0.map(|v| v + 1.0))]).unwrap();
        assert_ne!(t.value(l), &before);
        t.replay(&[(x, x0)]).unwrap();
        assert_eq!(t.value(l), &before);
        assert!(t.replay(&[(s, Tensor::zeros(&[3]))]).is_err());
    }
}
