//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation on [`Var`] produces a new node holding its value, its
//! parents and a closure mapping the output gradient to parent gradients.
//! Nodes whose parents carry no gradient requirement are recorded as
//! constants, so evaluation-mode forwards build no graph at all.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);
static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a trainable tensor across forward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice says which parents actually need a gradient.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A value in a differentiable computation.
#[derive(Clone)]
pub struct Var<T: Scalar>(Arc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn make(
        value: Tensor<T>,
        requires_grad: bool,
        param: Option<ParamId>,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Var(Arc::new(Node {
            id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            param,
            parents,
            backward,
        }))
    }

    /// A value that never receives gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, None, Vec::new(), None)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, None, Vec::new(), None)
    }

    /// A leaf bound to a parameter; its gradient is reported by [`Gradients::param`].
    pub fn param(id: ParamId, value: Tensor<T>) -> Self {
        Self::make(value, true, Some(id), Vec::new(), None)
    }

    /// Records an operation. The closure is dropped when no parent needs a gradient.
    pub fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(value, true, None, parents, Some(backward))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Cuts the graph: same value, no gradient path.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Back-propagates from a single-element output.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(self.value().numel(), 1, "backward() needs a scalar output, got {:?}", self.shape());
        self.backward_with(Tensor::ones(self.shape().to_vec()))
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape");
        let mut out = Gradients { by_node: HashMap::new(), by_param: HashMap::new() };
        if !self.requires_grad() {
            return out;
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
        grads.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id) else { continue };
            match &node.backward {
                None => {
                    if let Some(pid) = node.param {
                        accumulate(&mut out.by_param, pid, g.clone());
                    }
                    out.by_node.insert(node.id, g);
                }
                Some(f) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
                    let parent_grads = f(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        if !need {
                            continue;
                        }
                        if let Some(pg) = pg {
                            debug_assert_eq!(pg.shape(), p.shape(), "gradient shape for parent");
                            accumulate(&mut grads, p.id(), pg);
                        }
                    }
                }
            }
        }
        out
    }

    fn topo_order(&self) -> Vec<Arc<Node<T>>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Arc<Node<T>>, bool)> = vec![(Arc::clone(&self.0), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id) {
                continue;
            }
            stack.push((Arc::clone(&node), true));
            for p in &node.parents {
                if p.requires_grad() && !visited.contains(&p.0.id) {
                    stack.push((Arc::clone(&p.0), false));
                }
            }
        }
        order
    }
}

fn accumulate<K: std::hash::Hash + Eq, T: Scalar>(map: &mut HashMap<K, Tensor<T>>, key: K, g: Tensor<T>) {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
        }
    }
}

/// Gradients of leaves reachable from a backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar> {
    by_node: HashMap<u64, Tensor<T>>,
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.by_node.get(&v.id())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.by_param.iter()
    }

    pub fn num_params(&self) -> usize {
        self.by_param.len()
    }

    /// Adds another pass's parameter gradients into this one.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (k, v) in other.by_param {
            accumulate(&mut self.by_param, k, v);
        }
        for (k, v) in other.by_node {
            accumulate(&mut self.by_node, k, v);
        }
    }
}
