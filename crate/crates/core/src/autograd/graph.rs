use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{Float, Tensor};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse-mode rule for one recorded operation.
pub(crate) trait Backward<T: Float> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Adds this node's contribution to the gradients of its inputs.
    fn backward(&self, output: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>);

    /// Distance of the recorded forward evaluation from the nearest point where
    /// the op is not differentiable, if it has such points.
    fn kink_margin(&self, _nodes: &[Node<T>]) -> Option<T> {
        None
    }
}

pub(crate) enum NodeKind<T: Float> {
    Leaf,
    Param(ParamId),
    Op(Box<dyn Backward<T>>),
}

pub(crate) struct Node<T: Float> {
    pub(crate) value: Tensor<T>,
    pub(crate) kind: NodeKind<T>,
    pub(crate) requires_grad: bool,
}

/// Gradient accumulation view handed to [`Backward::backward`].
pub(crate) struct GradCtx<'a, T: Float> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Float> GradCtx<'a, T> {
    pub(crate) fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v`, zero-initialised on first touch. `None` when
    /// `v` does not require a gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }
}

/// Computation record: an append-only tape of values and the rules needed to
/// differentiate them. Inputs always precede the nodes that consume them, so
/// a reverse sweep over the tape is a valid topological order.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the graph can record a fresh forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    /// Records a constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, NodeKind::Leaf, false)
    }

    /// Records a leaf whose gradient is wanted.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, NodeKind::Leaf, true)
    }

    pub(crate) fn param(&mut self, id: ParamId, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, NodeKind::Param(id), true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, kind: NodeKind<T>, requires_grad: bool) -> Result<Var> {
        self.ensure_open()?;
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf input".into()));
        }
        Ok(self.push_node(Node { value, kind, requires_grad }))
    }

    pub(crate) fn push_op(&mut self, value: Tensor<T>, op: Box<dyn Backward<T>>) -> Result<Var> {
        self.ensure_open()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(Node { value, kind: NodeKind::Op(op), requires_grad }))
    }

    fn push_node(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ensure_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "record already differentiated; clear it before recording again".into(),
            ));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[cfg(test)]
    pub(crate) fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a rank-0 `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this record".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.rank() != 0 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.consumed = true;
        if !root.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let NodeKind::Op(op) = &self.nodes[idx].kind else {
                continue;
            };
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            let mut ctx = GradCtx { nodes: &self.nodes, grads: &mut self.grads };
            op.backward(&self.nodes[idx].value, &grad, &mut ctx);
            self.grads[idx] = Some(grad);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`. Nodes that
    /// require a gradient but were not reached get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !self.consumed || !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Gradients of every parameter leaf that was reached by the last
    /// backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.nodes.iter().zip(&self.grads).filter_map(|(node, g)| match (&node.kind, g) {
            (NodeKind::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    /// Smallest distance, over every non-smooth op on the tape, between the
    /// recorded forward evaluation and a kink. `None` if no such op was recorded.
    pub fn kink_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Op(op) => op.kink_margin(&self.nodes),
                _ => None,
            })
            .reduce(T::min)
    }

    /// Names of the recorded ops in tape order (leaves excluded).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Op(op) => Some(op.name()),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_precede_consumers() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = g.relu(x).unwrap();
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z).unwrap();
        for (idx, node) in g.nodes().iter().enumerate() {
            if let NodeKind::Op(op) = &node.kind {
                assert!(op.inputs().iter().all(|v| v.0 < idx));
            }
        }
        assert_eq!(g.op_names(), vec!["relu", "mul", "sum"]);
        g.backward(s).unwrap();
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Rank(_))));
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::full(vec![2], 1.0)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        assert!(matches!(g.relu(x), Err(Error::State(_))));
        g.clear();
        let x = g.variable(Tensor::full(vec![2], 1.0)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::full(vec![2], 1.0)).unwrap();
        let unused = g.variable(Tensor::full(vec![3], 1.0)).unwrap();
        let s = g.sum(x).unwrap();
        assert!(g.grad(x).is_none());
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::<f32>::new();
        let err = g.input(Tensor::full(vec![1], f32::NAN)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
