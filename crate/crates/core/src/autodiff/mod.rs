//! Reverse-mode automatic differentiation over a closed set of tensor ops.
//!
//! A [`Graph`] is an append-only arena: every op pushes one node holding its
//! output value and enough saved state to run its vector-Jacobian product.
//! Node indices are a topological order by construction, so [`Graph::backward`]
//! is a single reverse sweep.

mod backward;
mod conv;
mod ops;

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use conv::conv2d_im2col;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Exp(Var),
    Logistic(Var),
    Relu(Var),
    Silu(Var),
    ClampMin(Var, S),
    SumAll(Var),
    RowSum(Var),
    ColSum(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    GatherRows(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        pad_left: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    StraightThrough(Var),
    CrossEntropy {
        logits: Var,
        targets: Rc<[Option<usize>]>,
        probs: Vec<S>,
        count: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// Tape of tensor operations. Confined to one thread; build one per forward.
#[derive(Debug, Clone, Default)]
pub struct Graph<S: Scalar = f64> {
    pub(crate) nodes: Vec<Node<S>>,
    flops: u64,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate FLOPs (2 per MAC) spent in matmul and conv ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub(crate) fn add_flops(&mut self, f: u64) {
        self.flops += f;
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push_node(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg)
    }

    /// Runs reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let grads = backward::run(self, loss);
        Ok(Gradients { grads })
    }
}

/// Gradients of every leaf that required one, keyed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
