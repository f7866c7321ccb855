use crate::error::{invalid, Result, TensorError};
use crate::ops::Op;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<S> {
    pub value: Tensor<S>,
    pub op: Op<S>,
    pub needs_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are pushed after their inputs, so tape order is a topological
/// order and the backward pass is a single reverse sweep. With tracking
/// disabled the graph behaves as an eager evaluator: no backward records
/// or saved activations are kept.
pub struct Graph<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    tracking: bool,
    check_finite: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// Graph that records operations for differentiation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            tracking: true,
            check_finite: false,
        }
    }

    /// Graph for forward evaluation only.
    pub fn inference() -> Self {
        Self {
            tracking: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    /// Fail any operation whose output contains NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable input (a parameter or a probed input).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        let track = self.tracking;
        self.push_leaf(value, track)
    }

    fn push_leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<S>,
        op: Op<S>,
        inputs: &[Var],
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = self.tracking && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Accumulated gradient of the last backward pass(es) for a leaf.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grads[v.0].as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Reverse sweep from a scalar node, accumulating into leaf gradients.
    ///
    /// Repeated calls add to the existing leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.tracking {
            return Err(invalid("backward", "graph was built without tracking"));
        }
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.needs_grad {
            return Ok(());
        }
        // Intermediate gradients live in a scratch table; leaves keep theirs.
        let mut scratch: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = scratch[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.needs_grad {
                    accumulate(&mut self.grads[i], dy);
                }
                continue;
            }
            let contributions = node.op.backward(&self.nodes, &node.value, &dy);
            for (input, g) in contributions {
                if self.nodes[input.0].needs_grad {
                    accumulate(&mut scratch[input.0], g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, g: Vec<S>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e = *e + v),
        None => *slot = Some(g),
    }
}
