use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub type NodeId = usize;

/// Vector-Jacobian product of one recorded op.
///
/// Receives the upstream gradient, the op's own output value, and a mask
/// saying which parents need a gradient; returns one entry per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Wengert list of every op evaluated in one forward pass.
///
/// Nodes are appended in evaluation order, so a node's parents always have
/// smaller ids and a single reverse sweep visits each node once.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, NodeId>>,
    spent: Cell<bool>,
    record: bool,
    seed: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    pub fn with_seed(seed: u64) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            spent: Cell::new(false),
            record: true,
            seed,
        }
    }

    /// A tape that never keeps backward closures. Forward values are
    /// identical to a recording tape; `backward` yields no gradients.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Vec::new(), None, self.record)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Vec::new(), None, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node, so gradients accumulate in one place; a tape
    /// must therefore only ever see one store.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.push(store.shared(id), Vec::new(), None, self.record);
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    /// Records an op whose value was computed by the caller.
    pub fn record<'t>(&'t self, parents: &[Var<'t>], value: Tensor, backward: BackwardFn) -> Var<'t> {
        let nodes = self.nodes.borrow();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let ids = parents.iter().map(|p| p.id).collect();
        let backward = if requires_grad { Some(backward) } else { None };
        self.push(Arc::new(value), ids, backward, requires_grad)
    }

    fn push(
        &self,
        value: Arc<Tensor>,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. A tape can be swept once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        if self.spent.replace(true) {
            return Err(Error::Contract(
                "backward called twice on the same tape; re-run the forward pass".into(),
            ));
        }
        let loss_value = self.value(loss.id);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }

        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::ones(loss_value.shape().to_vec()));
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (backward, parents, trainable_leaf, out) = {
                let node = &mut nodes[id];
                (
                    node.backward.take(),
                    node.parents.clone(),
                    node.parents.is_empty() && node.requires_grad,
                    Arc::clone(&node.value),
                )
            };
            match backward {
                Some(backward) => {
                    let needs: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let parent_grads = backward(&g, &out, &needs);
                    debug_assert_eq!(parent_grads.len(), parents.len());
                    for ((p, pg), need) in parents.into_iter().zip(parent_grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                        accumulate(&mut grads[p], pg);
                    }
                }
                None => {
                    if trainable_leaf {
                        leaves.insert(id, g);
                    }
                }
            }
        }

        let params = self
            .params
            .borrow()
            .iter()
            .filter_map(|(&pid, node)| leaves.get(node).map(|_| (pid, *node)))
            .collect();
        Ok(Gradients { leaves, params })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Gradients of every trainable leaf reached by a backward sweep.
pub struct Gradients {
    leaves: HashMap<NodeId, Tensor>,
    params: HashMap<ParamId, NodeId>,
}

impl Gradients {
    pub fn of(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|n| self.leaves.get(n))
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&p, n)| self.leaves.get(n).map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}
