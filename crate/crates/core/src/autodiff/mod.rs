//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every primitive in evaluation order, so node indices are a
//! topological order and [`Tape::backward`] is a single reverse sweep. The
//! primitive set is closed and deliberately small: add, multiply, matmul,
//! masked matmul, tanh, exp, log, sum and broadcast. Everything the flow needs
//! (affine MADE layers, batch normalisation, Gaussian log-densities) is written
//! in terms of these.

mod tensor;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use tensor::matmul_raw;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: OpKind,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("sum axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
}

/// The primitive set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Multiply,
    MatMul,
    MaskedMatMul,
    Tanh,
    Exp,
    Log,
    Sum,
    Broadcast,
}

impl core::fmt::Display for OpKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let name = match self {
            OpKind::Add => "add",
            OpKind::Multiply => "multiply",
            OpKind::MatMul => "matmul",
            OpKind::MaskedMatMul => "masked_matmul",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Broadcast => "broadcast",
        };
        f.write_str(name)
    }
}

/// Index of a parameter block inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered parameter blocks.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    MaskedMatMul(Var, Var, Tensor),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var, Option<usize>),
    Broadcast(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients for every block of a [`Params`] store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn global_norm(&self) -> f64 {
        crate::math::sqrt(self.grads.iter().map(Tensor::norm_sq).sum())
    }
}

#[derive(Debug, Default, Clone)]
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn finite(op: &'static str, t: Tensor) -> Result<Tensor, AutodiffError> {
        if t.is_finite() {
            Ok(t)
        } else {
            Err(AutodiffError::NonFinite { op })
        }
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf(None), value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A leaf tied to a parameter block; [`Tape::backward`] reports its gradient.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        self.push(Op::Leaf(Some(id)), params.get(id).clone(), true)
    }

    fn same_shape(&self, op: OpKind, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(OpKind::Add, a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let value = Self::finite("add", value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(OpKind::Multiply, a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let value = Self::finite("multiply", value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    fn check_matmul(&self, op: OpKind, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.check_matmul(OpKind::MatMul, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (data, m, n) = matmul_raw(ta.data(), ta.dims2(), false, tb.data(), tb.dims2(), false);
        let value = Self::finite("matmul", Tensor::from_parts(vec![m, n], data))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    /// `a · (w ⊙ mask)`; `mask` is a constant of `w`'s shape.
    pub fn masked_matmul(&mut self, a: Var, w: Var, mask: &Tensor) -> Result<Var, AutodiffError> {
        self.check_matmul(OpKind::MaskedMatMul, a, w)?;
        if self.value(w).shape() != mask.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::MaskedMatMul,
                left: self.value(w).shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let masked = self.value(w).zip_map(mask, |x, m| x * m);
        let ta = self.value(a);
        let (data, m, n) = matmul_raw(ta.data(), ta.dims2(), false, masked.data(), masked.dims2(), false);
        let value = Self::finite("masked_matmul", Tensor::from_parts(vec![m, n], data))?;
        let ng = self.needs(a) || self.needs(w);
        Ok(self.push(Op::MaskedMatMul(a, w, mask.clone()), value, ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(crate::math::tanh);
        let ng = self.needs(a);
        Ok(self.push(Op::Tanh(a), value, ng))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = Self::finite("exp", self.value(a).map(crate::math::exp))?;
        let ng = self.needs(a);
        Ok(self.push(Op::Exp(a), value, ng))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = Self::finite("log", self.value(a).map(crate::math::ln))?;
        let ng = self.needs(a);
        Ok(self.push(Op::Log(a), value, ng))
    }

    /// Sum of all entries (`axis = None`, scalar result) or along an axis of a
    /// matrix, keeping that axis with length 1.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let value = match axis {
            None => Tensor::scalar(t.data().iter().sum()),
            Some(ax) => {
                if t.shape().len() != 2 || ax > 1 {
                    return Err(AutodiffError::BadAxis {
                        axis: ax,
                        shape: t.shape().to_vec(),
                    });
                }
                let (r, c) = t.dims2();
                if ax == 0 {
                    let mut out = vec![0.0; c];
                    for row in t.data().chunks_exact(c) {
                        for (o, v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::from_parts(vec![1, c], out)
                } else {
                    let out = t.data().chunks_exact(c).map(|row| row.iter().sum()).collect();
                    Tensor::from_parts(vec![r, 1], out)
                }
            }
        };
        let value = Self::finite("sum", value)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Sum(a, axis), value, ng))
    }

    /// Broadcast a single element to any shape, or a `[1, c]` row / `[r, 1]`
    /// column to `[r, c]`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let mismatch = || AutodiffError::ShapeMismatch {
            op: OpKind::Broadcast,
            left: t.shape().to_vec(),
            right: shape.to_vec(),
        };
        if shape.len() > 2 || shape.contains(&0) {
            return Err(mismatch());
        }
        let value = if t.len() == 1 {
            Tensor::full(shape, t.data()[0])
        } else {
            if shape.len() != 2 || t.shape().len() != 2 {
                return Err(mismatch());
            }
            let (r, c) = t.dims2();
            let (tr, tc) = (shape[0], shape[1]);
            if !((r == 1 || r == tr) && (c == 1 || c == tc)) {
                return Err(mismatch());
            }
            let mut out = Vec::with_capacity(tr * tc);
            for i in 0..tr {
                let si = if r == 1 { 0 } else { i };
                for j in 0..tc {
                    let sj = if c == 1 { 0 } else { j };
                    out.push(t.data()[si * c + sj]);
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        };
        let ng = self.needs(a);
        Ok(self.push(Op::Broadcast(a), value, ng))
    }

    /// `∂root/∂p` for every block of `params`. Blocks that do not reach `root` get
    /// zeros.
    pub fn backward(&self, root: Var, params: &Params) -> Result<Gradients, AutodiffError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf(Some(id)) => grads[id.0].add_assign(&g),
                Op::Leaf(None) => {}
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut adj, *a, g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut adj, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut adj, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.needs(*b) {
                        acc(&mut adj, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let (d, m, n) = matmul_raw(g.data(), g.dims2(), false, tb.data(), tb.dims2(), true);
                        acc(&mut adj, *a, Tensor::from_parts(vec![m, n], d));
                    }
                    if self.needs(*b) {
                        let (d, m, n) = matmul_raw(ta.data(), ta.dims2(), true, g.data(), g.dims2(), false);
                        acc(&mut adj, *b, Tensor::from_parts(vec![m, n], d));
                    }
                }
                Op::MaskedMatMul(a, w, mask) => {
                    let (ta, tw) = (self.value(*a), self.value(*w));
                    if self.needs(*a) {
                        let masked = tw.zip_map(mask, |x, m| x * m);
                        let (d, m, n) = matmul_raw(g.data(), g.dims2(), false, masked.data(), masked.dims2(), true);
                        acc(&mut adj, *a, Tensor::from_parts(vec![m, n], d));
                    }
                    if self.needs(*w) {
                        let (d, m, n) = matmul_raw(ta.data(), ta.dims2(), true, g.data(), g.dims2(), false);
                        let gw = Tensor::from_parts(vec![m, n], d).zip_map(mask, |x, m| x * m);
                        acc(&mut adj, *w, gw);
                    }
                }
                Op::Tanh(a) => {
                    acc(&mut adj, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y)));
                }
                Op::Exp(a) => {
                    acc(&mut adj, *a, g.zip_map(&node.value, |x, y| x * y));
                }
                Op::Log(a) => {
                    acc(&mut adj, *a, g.zip_map(self.value(*a), |x, y| x / y));
                }
                Op::Sum(a, axis) => {
                    let shape = self.value(*a).shape().to_vec();
                    let ga = match axis {
                        None => Tensor::full(&shape, g.data()[0]),
                        Some(ax) => {
                            let (r, c) = (shape[0], shape[1]);
                            let mut out = Vec::with_capacity(r * c);
                            for i in 0..r {
                                for j in 0..c {
                                    out.push(if *ax == 0 { g.data()[j] } else { g.data()[i] });
                                }
                            }
                            Tensor::from_parts(shape, out)
                        }
                    };
                    acc(&mut adj, *a, ga);
                }
                Op::Broadcast(a) => {
                    let src = self.value(*a);
                    let ga = if src.len() == 1 {
                        Tensor::from_parts(src.shape().to_vec(), vec![g.data().iter().sum()])
                    } else {
                        let (r, c) = src.dims2();
                        let (_, tc) = g.dims2();
                        let mut out = vec![0.0; r * c];
                        for (i, row) in g.data().chunks_exact(tc).enumerate() {
                            let si = if r == 1 { 0 } else { i };
                            for (j, v) in row.iter().enumerate() {
                                let sj = if c == 1 { 0 } else { j };
                                out[si * c + sj] += v;
                            }
                        }
                        Tensor::from_parts(src.shape().to_vec(), out)
                    };
                    acc(&mut adj, *a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
