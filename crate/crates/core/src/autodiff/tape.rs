use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Computes the gradient of each parent from the gradient of the node.
/// The flag slice says which parents actually need one; entries for the
/// others may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Records a computation for reverse-mode differentiation.
///
/// Every differentiable op pushes its output value together with a closure
/// that maps the output gradient back onto its inputs. [`Tape::backward`]
/// replays those closures in reverse order of creation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_node(Rc::new(value), Vec::new(), true, None)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(Rc::new(value), Vec::new(), false, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push_node(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        needs_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Records an op result. The backward closure is dropped when no input
    /// needs a gradient.
    pub(crate) fn push(&self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        let parents = parents.iter().map(|p| p.0).collect();
        if needs {
            self.push_node(Rc::new(value), parents, true, Some(backward))
        } else {
            self.push_node(Rc::new(value), parents, false, None)
        }
    }

    /// Propagates `d root / d node` to every node reachable from `root`.
    ///
    /// `root` must hold exactly one element.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones_like(root_value));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            // Intermediate gradients are dropped once consumed; leaves keep theirs.
            let Some(g) = grads[id].take() else { continue };
            let flags: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let parent_grads = backward(&g, &flags);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&flags) {
                let (Some(pg), true) = (pg, need) else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar root with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. `None` when the leaf does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
