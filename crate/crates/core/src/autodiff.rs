//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records one forward pass. Every differentiable value is a
//! [`Var`] borrowing the tape; operations on vars push a node holding a
//! backward closure. [`Tape::backward`] walks the nodes in reverse exactly
//! once and returns the gradients of the leaves.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Backward rule: receives the upstream gradient and, for each parent, whether
/// that parent wants a gradient; returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn FnOnce(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<Option<NodeId>>,
    backward: Option<BackwardFn>,
}

/// Recorded forward computation. Confined to one thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records operations for a later backward pass.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that never records: values only, intermediates dropped eagerly.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            consumed: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or input under test).
    pub fn leaf(&self, value: impl Into<Rc<Tensor>>) -> Var<'_> {
        let value = value.into();
        if !self.recording {
            return Var {
                tape: self,
                value,
                node: None,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: impl Into<Rc<Tensor>>) -> Var<'_> {
        Var {
            tape: self,
            value: value.into(),
            node: None,
        }
    }

    /// Record the result of an operation. Parents without a node are treated
    /// as constants; if no parent needs a gradient nothing is recorded.
    pub(crate) fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[&Var<'t>],
        backward: impl FnOnce(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Var<'t>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite {
                location: op.to_string(),
                index,
            });
        }
        let tracked = self.recording && parents.iter().any(|p| p.node.is_some());
        if !tracked {
            return Ok(Var {
                tape: self,
                value: Rc::new(value),
                node: None,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.node).collect(),
            backward: Some(Box::new(backward)),
        });
        Ok(Var {
            tape: self,
            value: Rc::new(value),
            node: Some(nodes.len() - 1),
        })
    }

    /// Back-propagate from `output`, seeding with ones (the gradient of
    /// `sum(output)`). Consumes the tape: a second call is an error.
    pub fn backward(&self, output: &Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let Some(root) = output.node else {
            return Ok(Gradients::default());
        };
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[root] = Some(vec![1.0; output.value.numel()]);

        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                leaves.insert(id, grad);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pid), Some(pg)) = (parent, pg) else {
                    continue;
                };
                match &mut grads[*pid] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { by_node: leaves })
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Default, Debug)]
pub struct Gradients {
    by_node: HashMap<NodeId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when it did not influence the output.
    pub fn get(&self, var: &Var<'_>) -> Option<Tensor> {
        let id = var.node?;
        self.by_node
            .get(&id)
            .map(|g| Tensor::from_parts(var.value.shape().to_vec(), g.clone()))
    }

    pub(crate) fn take_raw(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.by_node.remove(&id)
    }
}

/// A value on a tape.
#[derive(Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) value: Rc<Tensor>,
    pub(crate) node: Option<NodeId>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }
}
