//! Reverse-mode automatic differentiation on a dynamically built tape.
//!
//! A [`Tape`] is an append-only list of nodes in topological order. Each
//! node stores its operation, its parents and its forward value. Gradients
//! come in two flavours:
//!
//! - [`Tape::backward`] returns plain tensors.
//! - [`Tape::grad_on_tape`] appends the gradient computation to the tape
//!   itself, so the result can be differentiated again. Unrolled gradient
//!   descent is built this way and the outer objective is then
//!   differentiated through every step with one call to `backward`.
//!
//! Both paths run the same reverse sweep and the same kernels, so their
//! values agree bit for bit.

mod checkpoint;
mod ops;
mod reverse;

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;

pub use checkpoint::{checkpointed_vjp, CheckpointPlan, CheckpointedGrad};
pub use ops::{argmax, eval, Op};

use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Arc<Tensor>,
    requires_grad: bool,
}

impl Node {
    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// True when some leaf reaches this node through differentiable ops.
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

/// Gradients keyed by the node they were taken with respect to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }
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

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes
            .get(id.0)
            .is_some_and(|n| matches!(n.op, Op::Leaf))
    }

    /// Registers a differentiation root.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, Vec::new(), Arc::new(value), true);
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, Vec::new(), Arc::new(value), false)
    }

    fn push(
        &mut self,
        op: Op,
        parents: Vec<NodeId>,
        value: Arc<Tensor>,
        requires_grad: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        id
    }

    /// Appends `op` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Op::Leaf | Op::Constant) {
            return Err(Error::UnsupportedOp(alloc::string::String::from(op.name())));
        }
        for id in inputs {
            self.node(*id)?;
        }
        let args: Vec<&Tensor> = inputs.iter().map(|id| self.value(*id)).collect();
        let value = eval(&op, &args)?;
        let requires_grad =
            op.is_differentiable() && inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), Arc::new(value), requires_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.affine(a, factor, 0.0)
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.apply(Op::Affine { scale, shift }, &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::AddBias, &[a, bias])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SumRows, &[a])
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SumCols, &[a])
    }

    pub fn broadcast_rows(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        self.apply(Op::BroadcastRows { cols }, &[a])
    }

    pub fn broadcast_cols(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        self.apply(Op::BroadcastCols { rows }, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[a])
    }

    pub fn argmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::ArgMax, &[a])
    }

    /// Gradient of the scalar `root` with respect to each leaf in `wrt`.
    ///
    /// Leaves that `root` does not depend on get zero tensors.
    pub fn backward(&self, root: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
        let root_value = self.node(root)?.value();
        if !root_value.is_scalar() {
            return Err(Error::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        for &id in wrt {
            if !self.is_leaf(id) {
                return Err(Error::UnknownLeaf(id.0));
            }
        }
        let seed = Tensor::full(root_value.shape(), 1.0);
        self.backward_seeded(&[(root, seed)], wrt)
    }

    /// Vector-Jacobian product: propagates the given output cotangents back
    /// to `wrt`. Nodes in `wrt` are treated as independent inputs; the sweep
    /// does not continue through them into their own ancestors.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor)], wrt: &[NodeId]) -> Result<Gradients> {
        for (id, seed) in seeds {
            let node = self.node(*id)?;
            if node.value().shape() != seed.shape() {
                return Err(Error::ShapeMismatch {
                    op: "seed",
                    left: node.value().shape().to_vec(),
                    right: seed.shape().to_vec(),
                });
            }
        }
        for &id in wrt {
            self.node(id)?;
        }
        let mut builder = reverse::ValueBuilder { tape: self };
        let seeds = seeds
            .iter()
            .map(|(id, t)| (*id, Arc::new(t.clone())))
            .collect();
        let found = reverse::sweep(&mut builder, seeds, wrt)?;
        let mut grads = BTreeMap::new();
        for (&id, g) in wrt.iter().zip(found) {
            let g = match g {
                Some(g) => Arc::try_unwrap(g).unwrap_or_else(|shared| (*shared).clone()),
                None => Tensor::zeros(self.value(id).shape()),
            };
            grads.insert(id, g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of the scalar `root` with respect to arbitrary nodes, built
    /// as new nodes on this tape so that it stays differentiable.
    ///
    /// Unreached targets get constant zero nodes.
    pub fn grad_on_tape(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let shape = self.node(root)?.value().shape().to_vec();
        if !self.value(root).is_scalar() {
            return Err(Error::NotScalar { shape });
        }
        for &id in wrt {
            self.node(id)?;
        }
        let seed = self.constant(Tensor::full(&shape, 1.0));
        let mut builder = reverse::TapeBuilder { tape: self };
        let found = reverse::sweep(&mut builder, alloc::vec![(root, seed)], wrt)?;
        let mut out = Vec::with_capacity(wrt.len());
        for (&id, g) in wrt.iter().zip(found) {
            out.push(match g {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.value(id).shape());
                    self.constant(zeros)
                }
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        let f = |z: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(z.to_vec()).unwrap());
            let s = tape.softmax(x).unwrap();
            libm::log(tape.value(s).data()[0])
        };
        let oracle = fd_grad(f, &[0.0, 0.0], 1e-5);

        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let s = tape.softmax(z).unwrap();
        let l = tape.log(s).unwrap();
        let pick = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        let picked = tape.mul(l, pick).unwrap();
        let root = tape.sum(picked).unwrap();
        let g = tape.backward(root, &[z]).unwrap();
        let g = g.get(z).unwrap().data();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
        for (a, b) in g.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = tape.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let root = tape.sum(x).unwrap();
        let g = tape.backward(root, &[x, y]).unwrap();
        assert_eq!(g.get(y).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let e = tape.exp(x).unwrap();
        assert!(matches!(
            tape.backward(e, &[x]),
            Err(Error::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_rejects_unknown_leaf() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let c = tape.constant(Tensor::scalar(2.0));
        let r = tape.mul(x, c).unwrap();
        assert!(matches!(tape.backward(r, &[c]), Err(Error::UnknownLeaf(_))));
        assert!(matches!(
            tape.backward(r, &[NodeId(99)]),
            Err(Error::UnknownLeaf(99))
        ));
    }

    #[test]
    fn leaf_and_constant_are_not_appliable() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.apply(Op::Leaf, &[]),
            Err(Error::UnsupportedOp(_))
        ));
        assert!(matches!(
            tape.apply(Op::Exp, &[NodeId(3)]),
            Err(Error::UnknownNode(3))
        ));
    }

    #[test]
    fn clamp_gradient_is_masked() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.5, 2.0]).unwrap());
        let c = tape.clamp(x, 0.0, 1.0).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn argmax_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 3.0]).unwrap());
        let a = tape.argmax(x).unwrap();
        assert!(!tape.node(a).unwrap().requires_grad());
        assert_eq!(tape.value(a).item().unwrap(), 1.0);
        let s = tape.sum(x).unwrap();
        let root = tape.mul(a, s).unwrap();
        let g = tape.backward(root, &[x]).unwrap();
        // only the differentiable factor contributes: d(a * sum(x))/dx = a
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn second_derivative_through_tape_gradient() {
        // f(x) = x^3, f'(x) = 3x^2, f''(x) = 6x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let x2 = tape.mul(x, x).unwrap();
        let x3 = tape.mul(x2, x).unwrap();
        let d1 = tape.grad_on_tape(x3, &[x]).unwrap()[0];
        assert_eq!(tape.value(d1).item().unwrap(), 12.0);
        let d2 = tape.backward(d1, &[x]).unwrap();
        assert_eq!(d2.get(x).unwrap().item().unwrap(), 12.0);
    }

    #[test]
    fn tape_gradient_matches_value_gradient_bitwise() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![0.01, -0.02, 0.03]).unwrap());
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, -1.5, 0.25, 2.0]).unwrap());
        let z = tape.matmul(x, w).unwrap();
        let z = tape.add_bias(z, b).unwrap();
        let h = tape.tanh(z).unwrap();
        let p = tape.softmax(h).unwrap();
        let l = tape.log(p).unwrap();
        let root = tape.mean(l).unwrap();
        let values = tape.backward(root, &[w, b]).unwrap();
        let nodes = tape.grad_on_tape(root, &[w, b]).unwrap();
        assert_eq!(tape.value(nodes[0]), values.get(w).unwrap());
        assert_eq!(tape.value(nodes[1]), values.get(b).unwrap());
    }
}
