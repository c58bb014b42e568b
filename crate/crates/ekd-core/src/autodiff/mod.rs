//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every differentiable operation in execution order;
//! inputs always precede the operations that consume them, so one reverse
//! sweep visits each recorded operation exactly once and accumulates (sums)
//! gradients into shared inputs. A tape and the values it owns are confined
//! to one thread for the duration of a forward/backward pass.

mod gradcheck;
mod kernels;
mod ops;

pub use gradcheck::{grad_check, ComponentCheck, GradCheckReport, GradCheckSettings};
pub use kernels::{ConvGeom, PoolGeom};
pub use ops::bn_batch_stats;

use crate::error::{EkdError, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op<E: Scalar> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScalarMul { a: usize, factor: E },
    AddBias { x: usize, bias: usize },
    MatMul { a: usize, b: usize },
    Relu { x: usize },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Im2Col { x: usize, geom: ConvGeom },
    MaxPool { x: usize, argmax: Vec<u32> },
    GlobalAvgPool { x: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    SumAxis { x: usize, axis: usize },
    SumAll { x: usize },
    BatchNorm(Box<BatchNormCtx<E>>),
}

/// Saved context for batch-norm backward. When `stats_from_batch` is set the
/// mean/variance were computed from `x` and the backward pass includes their
/// dependence on the input; otherwise they are treated as constants
/// (running-statistics evaluation mode).
#[derive(Debug)]
pub(crate) struct BatchNormCtx<E: Scalar> {
    pub x: usize,
    pub scale: usize,
    pub shift: usize,
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
    pub stats_from_batch: bool,
}

impl<E: Scalar> Op<E> {
    fn for_inputs(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::MatMul { a, b } => {
                f(*a);
                f(*b);
            }
            Op::AddBias { x, bias } => {
                f(*x);
                f(*bias);
            }
            Op::ScalarMul { a, .. } => f(*a),
            Op::Relu { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Im2Col { x, .. }
            | Op::MaxPool { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::SumAll { x } => f(*x),
            Op::BatchNorm(ctx) => {
                f(ctx.x);
                f(ctx.scale);
                f(ctx.shift);
            }
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node<E: Scalar> {
    pub value: Tensor<E>,
    pub grad: Option<Vec<E>>,
    pub requires_grad: bool,
    pub op: Op<E>,
}

/// Ordered record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Tape<E: Scalar> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(EkdError::non_finite("leaf"));
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: E) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Value-identical copy through which gradients never flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, or `None` if backward never reached this value.
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape().to_vec(), g.clone())
                .expect("grad buffer mirrors value shape")
        })
    }

    /// Accumulated gradient, zeros if backward never reached this value.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<E> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
    }

    /// Runs the reverse sweep from a scalar root, accumulating `d root / d v`
    /// into every reachable `requires_grad` value. Gradients from repeated
    /// uses of the same value sum. Calling on a tape with no gradient path is
    /// a no-op.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rid = root.0;
        if rid >= self.nodes.len() {
            return Err(EkdError::Contract("backward root is not on this tape".into()));
        }
        if self.nodes[rid].value.numel() != 1 {
            return Err(EkdError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[rid].value.shape()
            )));
        }
        if !self.nodes[rid].requires_grad {
            return Ok(());
        }

        // Only the subgraph between the root and grad-requiring leaves needs
        // a visit; detached branches recorded on the same tape are skipped.
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![rid];
        while let Some(id) = stack.pop() {
            if reachable[id] {
                continue;
            }
            reachable[id] = true;
            let mut pending: Vec<usize> = Vec::new();
            self.nodes[id].op.for_inputs(|input| {
                pending.push(input);
            });
            for input in pending {
                if self.nodes[input].requires_grad && !reachable[input] {
                    stack.push(input);
                }
            }
        }

        match &mut self.nodes[rid].grad {
            Some(g) => g[0] = g[0] + E::one(),
            None => self.nodes[rid].grad = Some(vec![E::one()]),
        }

        for id in (0..self.nodes.len()).rev() {
            if reachable[id] && self.nodes[id].grad.is_some() {
                self.backprop_node(id);
            }
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(id)
    }

    /// Records a computed op output, propagating `requires_grad` from inputs
    /// and rejecting non-finite results.
    pub(crate) fn record(
        &mut self,
        op_name: &'static str,
        value: Tensor<E>,
        op: Op<E>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(EkdError::non_finite(op_name));
        }
        let mut requires = false;
        op.for_inputs(|input| requires |= self.nodes[input].requires_grad);
        Ok(self.push(value, requires, op))
    }

    pub(crate) fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }
}

/// Adds `contrib` into the gradient buffer of `nodes[idx]` if it requires one.
pub(crate) fn accumulate<E: Scalar>(nodes: &mut [Node<E>], idx: usize, contrib: &[E]) {
    let node = &mut nodes[idx];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi = *gi + *ci;
            }
        }
        None => node.grad = Some(contrib.to_vec()),
    }
}

/// Like [`accumulate`] but takes ownership, avoiding a copy on first use.
pub(crate) fn accumulate_owned<E: Scalar>(nodes: &mut [Node<E>], idx: usize, contrib: Vec<E>) {
    let node = &mut nodes[idx];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(&contrib) {
                *gi = *gi + *ci;
            }
        }
        None => node.grad = Some(contrib),
    }
}
