//! Reverse-mode differentiation over a recorded graph of tensor primitives.
//!
//! A [`Graph`] owns every value produced during a forward pass. Leaves are
//! either constants (frozen weights, inputs) or named parameters; only named
//! parameters receive entries in the [`GradRecord`] returned by
//! [`Graph::backward`]. Nodes that do not depend on any parameter are never
//! visited during the backward sweep.

mod backward;
mod ops;

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::{primitive_set, Primitive};
pub(crate) use ops::incidence_weights;

thread_local! {
    static BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: while enabled on the current thread, the softmax backward rule
/// is deliberately wrong. Used as a negative control for gradient checking.
pub fn inject_backward_fault(enabled: bool) {
    BACKWARD_FAULT.with(|f| f.set(enabled));
}

pub(crate) fn backward_fault_active() -> bool {
    BACKWARD_FAULT.with(Cell::get)
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: ops::Op,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    warnings: Vec<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf. It never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, ops::Op::Leaf, false, None)
    }

    /// A trainable leaf registered under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, ops::Op::Leaf, true, Some(name.into()))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub(crate) fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.warnings.push(message);
    }

    /// Scans every recorded value for NaN or infinity.
    pub fn validate(&self) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "node {id} ({}) holds a non-finite value",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        op: ops::Op,
        requires_grad: bool,
        param: Option<String>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }
}
