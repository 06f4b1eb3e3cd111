use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Computes the gradient of each parent given the gradient of the output.
/// A `None` entry means "no contribution".
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[Var]) -> Vec<Option<Tensor>>>;

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A node in a dynamically built computation graph.
///
/// Graphs are built fresh for every forward pass. A `Var` is a leaf when it
/// was created with [`Var::leaf`]; nodes derived only from constants are
/// themselves constants and record no backward closure.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A trainable leaf; its gradient is reported by [`Var::backward`].
    pub fn leaf(value: Tensor) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Node {
                id: next_id(),
                value,
                requires_grad: true,
                parents,
                backward: Some(backward),
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from a single-element output.
    ///
    /// Only gradients of leaves are retained in the result.
    pub fn backward(&self) -> Gradients {
        assert_eq!(
            self.value().numel(),
            1,
            "backward() needs a scalar output, got shape {:?}",
            self.shape()
        );
        let mut grads: HashMap<u64, Tensor> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { map: grads };
        }
        let order = self.topo_order();
        grads.insert(self.id(), Tensor::full(self.shape(), 1.0));
        let mut leaves = HashMap::new();
        for node in order.iter().rev() {
            let Some(grad) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    leaves.insert(node.id(), grad);
                }
                Some(f) => {
                    let parent_grads = f(&grad, &node.0.parents);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), parent.shape());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Gradients { map: leaves }
    }

    /// Post-order over the nodes that require gradients.
    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.0.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Leaf gradients produced by [`Var::backward`].
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    /// `None` when the leaf did not influence the output.
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.map.get(&var.id())
    }

    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        self.map.remove(&var.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
