// SPDX-License-Identifier: MIT OR Apache-2.0

//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every value produced during a forward pass together
//! with the primitive that produced it. Nodes are appended in evaluation
//! order, so the tape is always topologically sorted and [`Tape::backward`]
//! is a single reverse sweep.
//!
//! `requires_grad` propagates forward: a node requires a gradient iff one of
//! its parents does. Frozen tensors enter the tape as constants and the
//! backward sweep never touches the subgraphs that hang only off constants.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheck};
pub use ops::{Op, Target, MASKED_SCORE};

use crate::error::{Error, Result};
use crate::linalg::Tensor;

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub value: Tensor,
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, Vec::new(), requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// Frozen leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<NodeId>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            value,
            op,
            parents,
            requires_grad,
        });
        id
    }

    /// Evaluate `op` on `inputs` and append the result.
    pub fn forward_op(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::shape(format!("node {} is not on this tape", bad.0)));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = op.forward(&values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(value, op, inputs.to_vec(), requires_grad))
    }

    /// Gradients of a scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::NotScalar { len: n });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| self.value(*p)).collect();
            let wanted: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let contribs = node.op.backward(&inputs, &node.value, &g, &wanted)?;
            for ((parent, want), contrib) in node.parents.iter().zip(&wanted).zip(contribs) {
                if !want {
                    continue;
                }
                let Some(c) = contrib else { continue };
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
            grads[idx] = Some(g);
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let g = grads.get_mut(idx).and_then(Option::take);
            out.push(match (node.requires_grad, g) {
                (false, _) => None,
                (true, Some(g)) => Some(g),
                (true, None) => Some(Tensor::zeros(node.value.shape())),
            });
        }
        Ok(Gradients { grads: out })
    }

    // Convenience wrappers, one per primitive.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Transpose, &[a])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.forward_op(Op::Scale(s), &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Tanh, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Softmax, &[a])
    }
    pub fn layernorm(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::LayerNorm { eps: ops::LAYERNORM_EPS }, &[a])
    }
    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        self.forward_op(Op::Embedding { ids }, &[table])
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.forward_op(Op::Slice { axis, start, end }, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.forward_op(Op::Concat { axis }, parts)
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Mean, &[a])
    }
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.forward_op(Op::MseLoss, &[pred, target])
    }
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<Target>) -> Result<NodeId> {
        self.forward_op(Op::SoftmaxCrossEntropy { targets }, &[logits])
    }
    pub fn causal_mask(&mut self, scores: NodeId, segment: usize) -> Result<NodeId> {
        self.forward_op(Op::CausalMask { segment }, &[scores])
    }
    pub fn scatter_rows(&mut self, base: NodeId, rows: Vec<usize>, src: NodeId) -> Result<NodeId> {
        self.forward_op(Op::ScatterRows { rows }, &[base, src])
    }
}

/// Gradients returned by [`Tape::backward`]. Every node with
/// `requires_grad` has an entry; nodes that do not reach the loss hold
/// zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Iterate over `(node, gradient)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (NodeId(i), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn add_values() {
        let mut t = Tape::new();
        let a = t.constant(v(&[1.0, 2.0]));
        let b = t.constant(v(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_value_and_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(v(&[0.0]));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5]);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.param(v(&[3.0]));
        let xx = t.mul(x, x).unwrap();
        let s = t.sum(xx).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn layernorm_is_standardized() {
        let mut t = Tape::new();
        let x = t.constant(v(&[1.0, 2.0, 3.0]));
        let y = t.layernorm(x).unwrap();
        // Hand computation: mean 2, biased variance 2/3.
        let sd = (2.0f64 / 3.0 + 1e-5).sqrt();
        let want = [-1.0 / sd, 0.0, 1.0 / sd];
        for (a, b) in t.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NotScalar { len: 2 })));
    }

    #[test]
    fn unreachable_params_get_zero_gradient_and_constants_none() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0, 2.0]));
        let unused = t.param(v(&[5.0]));
        let c = t.constant(v(&[1.0, 1.0]));
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = CounterRng::new(4);
            let mut t = Tape::new();
            let a = t.param(Tensor::gaussian(&[3, 4], 1.0, &mut rng));
            let b = t.param(Tensor::gaussian(&[4, 2], 1.0, &mut rng));
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax(c).unwrap();
            let l = t.sum(s).unwrap();
            let l = t.tanh(l).unwrap();
            let g = t.backward(l).unwrap();
            (
                t.value(l).clone(),
                g.get(a).unwrap().clone(),
                g.get(b).unwrap().clone(),
            )
        };
        assert_eq!(run(), run());
    }
}
