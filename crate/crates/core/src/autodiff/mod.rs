//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. A node stores
//! its forward value, the ids of its inputs and, if any input is tracked, a
//! closure that maps the output gradient to input gradients. Because nodes are
//! only ever appended, ids are a topological order and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! ```
//! use randq_core::autodiff::Tape;
//! use randq_core::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
//! let loss = x.mul(x).sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod norms;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;

pub use norms::Axis;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs handed to a backward rule.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
}

/// Maps the output gradient to one optional gradient per input.
/// `None` means "no contribution".
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    first_overflow: Cell<Option<usize>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
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

    /// In debug builds, the first node whose value went non-finite although all
    /// of its inputs were finite. Always `None` in release builds.
    pub fn first_overflow(&self) -> Option<usize> {
        self.first_overflow.get()
    }

    /// A gradient-tracked leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// An untracked leaf; no gradient is ever computed for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), backward: None, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records an operation. The backward rule is dropped when no input is tracked.
    pub fn op<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        if cfg!(debug_assertions)
            && self.first_overflow.get().is_none()
            && !value.all_finite()
            && parents.iter().all(|p| nodes[p.id].value.all_finite())
        {
            self.first_overflow.set(Some(nodes.len()));
        }
        let tracked = parents.iter().any(|p| nodes[p.id].tracked);
        let node = Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if tracked { Some(Box::new(backward)) } else { None },
            tracked,
        };
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn is_tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<GradStore> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.tracked {
            return Err(Error::Contract("loss does not depend on any tracked tensor".into()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));
        let mut store = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                if node.tracked {
                    store.insert(id, grad);
                }
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                output: &node.value,
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (&parent, g) in node.parents.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[parent].tracked {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[parent].value.shape(), "gradient shape");
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(GradStore { grads: store })
    }
}

/// Gradients of tracked leaves, keyed by node id.
#[derive(Debug, Default)]
pub struct GradStore {
    grads: HashMap<usize, Tensor>,
}

impl GradStore {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn remove(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.remove(&var.id)
    }

    /// Gradient of `var`, or zeros when the loss does not reach it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros_like(&var.value()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.is_tracked(self.id)
    }
}
