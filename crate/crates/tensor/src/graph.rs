//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Graph`]. Nodes only
//! reference earlier nodes, so creation order is a topological order and the
//! backward sweep is a single reverse pass over the tape.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;
use crate::vjp;

pub(crate) type NodeId = usize;

#[derive(Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: T },
    AddScalar { a: NodeId },
    /// `a: [.., m, k]` times `b: [k, n]` (shared) or `b: [.., k, n]` (batched).
    MatMul { a: NodeId, b: NodeId, batched: bool },
    Exp { a: NodeId },
    Log { a: NodeId },
    Sigmoid { a: NodeId },
    Gelu { a: NodeId },
    Softplus { a: NodeId },
    Clamp { a: NodeId, lo: T, hi: T },
    Reshape { a: NodeId },
    Permute { a: NodeId, perm: Vec<usize> },
    BroadcastTo { a: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    GatherRows { a: NodeId, rows: Rc<Vec<usize>> },
    SumAll { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    MeanAxis { a: NodeId, axis: usize },
    MaskedMean { x: NodeId, mask: NodeId, axis: usize, counts: Rc<Vec<T>> },
    SegmentMean { x: NodeId, segments: Rc<Vec<usize>>, counts: Rc<Vec<T>> },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    MaskedSoftmax { s: NodeId, mask: NodeId, relaxed: Rc<Tensor<T>> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Rc<Tensor<T>>, rstd: Rc<Vec<T>> },
    StraightThrough { soft: NodeId },
}

pub(crate) struct Node<T: Element> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// A tape recording one forward computation.
///
/// Build a fresh graph per training step; [`Graph::backward`] consumes it.
pub struct Graph<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    named: RefCell<BTreeMap<String, NodeId>>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Element = f32> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: NodeId,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            named: RefCell::new(BTreeMap::new()),
            consumed: Cell::new(false),
        }
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A value that gradients do not flow into.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// An unnamed leaf that receives a gradient.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A named trainable leaf. Binding the same name twice returns the same var.
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.named.borrow().get(name) {
            return Var { graph: self, id };
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.named.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    /// A leaf excluded from differentiation (frozen parameter). Frozen
    /// leaves are not registered by name, so frozen stores with overlapping
    /// names can share a graph.
    pub fn frozen(&self, _name: &str, value: &Tensor<T>) -> Var<'_, T> {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf gets a gradient; leaves the loss does not depend
    /// on get zeros. The tape is released afterwards.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let loss_shape = loss.shape();
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.consumed.set(true);
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::ones(&loss_shape));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, ig) in vjp::vjp(&nodes, id, g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let mut leaves = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                leaves.insert(id, g);
            }
        }
        let names = self
            .named
            .borrow()
            .iter()
            .filter(|(_, id)| leaves.contains_key(id))
            .map(|(n, &id)| (n.clone(), id))
            .collect();
        Ok(Gradients { leaves, names })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Element> {
    leaves: HashMap<NodeId, Tensor<T>>,
    names: BTreeMap<String, NodeId>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a trainable leaf, `None` for anything else.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|id| self.leaves.get(id))
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    /// Named gradients in name order.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        let names = std::mem::take(&mut self.names);
        names
            .into_iter()
            .filter_map(|(n, id)| self.leaves.remove(&id).map(|g| (n, g)))
            .collect()
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Value of a scalar var.
    pub fn item(&self) -> T {
        self.value().item()
    }
}
