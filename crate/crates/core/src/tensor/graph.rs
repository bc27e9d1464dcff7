use std::collections::HashMap;

use super::ops::{backward_op, Op};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

pub(super) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Record of executed operations for one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. [`Graph::backward`] consumes the graph, which frees
/// every activation once its gradient has been propagated.
#[derive(Default)]
pub struct Graph {
    pub(super) nodes: Vec<Node>,
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

    /// Records an input tensor. Gradients are tracked iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        tensor.zero_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(super) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Untracked results do not need their recorded inputs.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// tracked leaf. Gradients from fan-out add up.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalar {
                op: "backward",
                shape,
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaves = HashMap::new();
        self.nodes.truncate(loss.0 + 1);
        for i in (0..=loss.0).rev() {
            let Some(out_grad) = grads[i].take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaves.insert(i, out_grad);
                }
            } else {
                backward_op(&node.op, &node.value, &out_grad, before, &mut grads);
            }
            // The activation is dead once its own op has been differentiated.
            node.value = Tensor::scalar(0.0);
            node.op = Op::Leaf;
        }
        Ok(Gradients { by_node: leaves })
    }
}

/// Gradients of tracked leaves, produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(&v.0).map(Vec::as_slice)
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.by_node.remove(&v.0)
    }

    /// Moves the gradient of `v` into `tensor.grad`, or zeros if the loss
    /// does not depend on `v`.
    pub fn write_into(&mut self, v: Var, tensor: &mut Tensor) -> Result<()> {
        let g = self.take(v).unwrap_or_else(|| vec![0.0; tensor.numel()]);
        tensor.set_grad(g)
    }
}

/// Adds `delta` into the gradient slot of `v` when `v` is tracked.
pub(super) fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}
