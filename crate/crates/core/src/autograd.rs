//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates eagerly, stores its output on the tape and records a
//! closure that maps the output gradient to input gradients. [`Tape::backward`]
//! walks the tape once in reverse.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees.
pub struct BackwardArgs<'a, S> {
    pub grad: &'a Tensor<S>,
    pub inputs: &'a [&'a Tensor<S>],
    pub output: &'a Tensor<S>,
    /// Whether each input needs a gradient; closures may skip the others.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<S> = Box<dyn Fn(&BackwardArgs<'_, S>) -> Vec<Option<Tensor<S>>>>;

struct Node<S> {
    value: Tensor<S>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
    op: &'static str,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            op: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
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

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Records an op output. Non-finite outputs are rejected.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<S>,
        inputs: &[Var],
        backward: BackwardFn<S>,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradients of the single-element `loss` with respect to every
    /// `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let seed_shape = self.shape(loss);
        if seed_shape.iter().product::<usize>() != 1 {
            return Err(Error::shape("backward", seed_shape, &[1]));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(seed_shape));
        let mut leaf_grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                if node.requires_grad {
                    leaf_grads[i] = Some(grad);
                }
                continue;
            };
            let inputs: Vec<&Tensor<S>> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let input_grads = backward(&BackwardArgs {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for ((&j, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[j].value.shape(), "op {}", node.op);
                match &mut grads[j] {
                    Some(acc) => acc.axpy(S::one(), &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for g in leaf_grads.iter().flatten() {
            g.ensure_finite("gradient")?;
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when `v` is not a differentiable leaf or did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
