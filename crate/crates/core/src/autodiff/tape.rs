//! Arena tape for reverse-mode differentiation.
//!
//! Every operation appends its result to the arena, so node ids are a
//! topological order by construction: inputs always precede outputs.
//! [`Tape::backward`] walks the arena once in reverse.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::ops::Op;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// A tape-resident array: value, gradient and differentiability flag.
#[derive(Debug, Clone)]
pub struct DiffArray<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) node_id: usize,
}

impl<T: Scalar> DiffArray<T> {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.value
    }

    /// Accumulated gradient; `None` until a backward pass reaches this leaf.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> usize {
        self.node_id
    }
}

/// Records operations over [`DiffArray`]s for one forward/backward pass.
///
/// A tape is single-threaded; run separate tapes for concurrent passes.
#[derive(Debug)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<DiffArray<T>>,
    pub(crate) ops: Vec<Op<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf. No gradient is ever allocated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn node(&self, v: Var) -> &DiffArray<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zeros if the node never received one.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap(),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(DiffArray {
            value,
            grad: None,
            requires_grad,
            node_id: id,
        });
        self.ops.push(op);
        Var(id)
    }

    /// Backpropagates from a scalar `loss` into every differentiable leaf.
    ///
    /// Leaf gradients accumulate across calls; use [`Tape::zero_grad`] to
    /// reset them. Intermediate gradients are transient and not retained.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.ops[id], Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            self.ops[id].backward(&self.nodes[id].value, &g, &mut sink);
        }
        Ok(())
    }
}

/// Lazily allocated gradient buffers handed to backward rules.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [DiffArray<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    /// Gradient buffer for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn get(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor<T> {
        let nodes: &'a [DiffArray<T>] = self.nodes;
        &nodes[v.0].value
    }
}
