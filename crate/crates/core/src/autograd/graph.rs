use std::collections::HashMap;

use super::tensor::{Scalar, Tensor};
use crate::nn::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

/// How a graph leaf participates in differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Leaf {
    /// Data that never receives a gradient.
    Constant,
    /// Free input whose gradient can be requested.
    Variable,
    Param(ParamId),
}

/// Backward rule of a recorded operation.
///
/// `needs[i]` tells whether input `i` lies on a path to a requested leaf;
/// implementations may return `None` for the others.
pub trait Backward<T: Scalar> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<NodeId>,
    kind: NodeKind<T>,
}

enum NodeKind<T: Scalar> {
    Leaf(Leaf),
    Op(Box<dyn Backward<T>>),
}

/// Tape of values recorded during one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
    running_updates: Vec<RunningUpdate<T>>,
}

/// Exponential-average update of a stored buffer, deferred until the
/// forward pass is complete so that parameters can be borrowed immutably.
pub struct RunningUpdate<T> {
    pub target: ParamId,
    pub momentum: T,
    pub observed: Vec<T>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            running_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, inputs: Vec<NodeId>, kind: NodeKind<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            inputs,
            kind,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Vec::new(), NodeKind::Leaf(Leaf::Constant))
    }

    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Vec::new(), NodeKind::Leaf(Leaf::Variable))
    }

    /// Leaf for a stored parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(
            store.value(id).clone(),
            Vec::new(),
            NodeKind::Leaf(Leaf::Param(id)),
        );
        self.param_nodes.insert(id, node);
        node
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn record(
        &mut self,
        inputs: &[NodeId],
        value: Tensor<T>,
        backward: impl Backward<T> + 'static,
    ) -> NodeId {
        self.push(value, inputs.to_vec(), NodeKind::Op(Box::new(backward)))
    }

    pub fn defer_running_update(&mut self, update: RunningUpdate<T>) {
        self.running_updates.push(update);
    }

    /// Applies deferred buffer updates in recording order.
    pub fn commit_running_updates(&mut self, store: &mut ParamStore<T>) {
        for u in self.running_updates.drain(..) {
            let keep = T::one() - u.momentum;
            for (r, &o) in store.value_mut(u.target).data_mut().iter_mut().zip(&u.observed) {
                *r = keep * *r + u.momentum * o;
            }
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Reverse-mode sweep from `root`, seeded with ones.
    ///
    /// Only leaves accepted by `wants` (and nodes depending on them) are
    /// differentiated.
    pub fn backward(&self, root: NodeId, wants: impl Fn(Leaf) -> bool) -> Gradients<T> {
        let n = root.0 + 1;
        let mut needs = vec![false; n];
        for (i, node) in self.nodes[..n].iter().enumerate() {
            needs[i] = match &node.kind {
                NodeKind::Leaf(leaf) => wants(*leaf),
                NodeKind::Op(_) => node.inputs.iter().any(|p| needs[p.0]),
            };
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if needs[root.0] {
            grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let NodeKind::Op(op) = &node.kind else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let input_needs: Vec<bool> = node.inputs.iter().map(|p| needs[p.0]).collect();
            if !input_needs.iter().any(|&b| b) {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|p| &self.nodes[p.0].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &input_needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((parent, g), need) in node.inputs.iter().zip(input_grads).zip(input_needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[parent.0].value.shape(),
                    "gradient shape mismatch"
                );
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut leaves = HashMap::new();
        for (i, slot) in grads.into_iter().enumerate() {
            if let (Some(g), NodeKind::Leaf(_)) = (slot, &self.nodes[i].kind) {
                leaves.insert(NodeId(i), g);
            }
        }
        let params = self
            .param_nodes
            .iter()
            .filter_map(|(&pid, node)| leaves.get(node).map(|_| (pid, *node)))
            .collect();
        Gradients { leaves, params }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    leaves: HashMap<NodeId, Tensor<T>>,
    params: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.leaves.get(&id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|n| self.leaves.get(n))
    }
}
