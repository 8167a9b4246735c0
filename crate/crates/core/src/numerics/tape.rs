//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the list once in reverse, so node order is the topological order.

use alloc::boxed::Box;
use alloc::vec::Vec;

use super::ops::{vjp, Op};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside the built-in op set.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the tape only needs the vector-Jacobian product.
pub trait CustomOp<S: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Gradient for each input given the upstream gradient of the output.
    /// `None` marks an input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad_output: &Tensor<S>) -> Vec<Option<Tensor<S>>>;
}

pub(crate) struct Node<S: Scalar> {
    pub(crate) value: Tensor<S>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor<S>>,
    pub(crate) op: Op<S>,
}

pub struct Tape<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant (no gradient).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a differentiable input.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, true, Op::Leaf)
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

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.nodes[v.0].grad.take()
    }

    /// Records the output of a [`CustomOp`]. `output` must already hold the
    /// forward value.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<S>, op: Box<dyn CustomOp<S>>) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        self.push(output, rg, Op::Custom(inputs.to_vec(), op))
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    /// Clears every gradient so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse pass from a scalar `loss`, populating the gradient of every
    /// reachable node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let seed = Tensor::ones(shape);
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            let contributions = vjp(&self.nodes, i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                debug_assert_eq!(node.value.shape(), cg.shape(), "gradient shape");
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&cg),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }
}
