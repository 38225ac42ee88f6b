use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Result, Tensor, TensorError};

/// Vector-Jacobian product of one recorded operation.
///
/// Receives the upstream gradient (laid out like the op's output) and a mask
/// of which parents need a gradient; returns one entry per parent.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Ordered record of primitive operations. Node ids are assigned in creation
/// order, which is a topological order of the graph.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op)
            .field("shape", &node.value.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push("leaf", value, Vec::new(), None, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node and accumulated gradient.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.grads.clear();
    }

    /// Clears accumulated leaf gradients, keeping the recorded graph.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records the result of a custom differentiable operation.
    ///
    /// `backward` is only stored when at least one parent needs a gradient.
    pub fn custom(
        &self,
        op: &'static str,
        parents: &[&Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var> {
        for p in parents {
            if !Rc::ptr_eq(&p.tape.inner, &self.inner) {
                return Err(TensorError::TapeMismatch);
            }
        }
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let inner = self.inner.borrow();
            ids.iter().any(|&i| inner.nodes[i].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        Ok(self.push(op, value, ids, backward, requires_grad))
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        inner.grads.push(None);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`] or
    /// [`Tape::reset`]; intermediate gradients are recomputed on every call.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if !Rc::ptr_eq(&loss.tape.inner, &self.inner) {
            return Err(TensorError::TapeMismatch);
        }
        let mut inner = self.inner.borrow_mut();
        let TapeInner { nodes, grads } = &mut *inner;
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                accumulate(&mut grads[id], g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.len(), nodes[p].value.numel(), "op {}", node.op);
                    accumulate(&mut local[p], pg);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        let shape = inner.nodes[self.id].value.shape().to_vec();
        inner.grads[self.id]
            .as_ref()
            .map(|g| Tensor::new(shape, g.clone()).expect("grad shape matches value"))
    }

    pub(crate) fn same_tape(&self, other: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    /// Records an op whose parents are `parents`; `make_backward` is only
    /// invoked when some parent requires a gradient.
    pub(crate) fn record(
        op: &'static str,
        parents: &[&Var],
        value: Tensor,
        make_backward: impl FnOnce() -> BackwardFn,
    ) -> Var {
        let tape = parents[0].tape.clone();
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let inner = tape.inner.borrow();
            ids.iter().any(|&i| inner.nodes[i].requires_grad)
        };
        let backward = requires_grad.then(make_backward);
        tape.push(op, value, ids, backward, requires_grad)
    }
}
