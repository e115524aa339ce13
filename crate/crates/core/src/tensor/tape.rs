use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::ops::Op;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) type NodeId = usize;

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records operations in execution order for one forward/backward pass.
///
/// A fresh tape is built for every step. Parameters are registered by name
/// and each name may be registered once.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<String, NodeId>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: NodeId,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant)
    }

    /// Records a named trainable leaf.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Result<Var<'_, T>> {
        if self.params.borrow().contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter `{name}` registered twice on one tape"
            )));
        }
        let var = self.push(value, Op::Leaf);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.borrow().keys().cloned().collect()
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Leaf => true,
            op => op.inputs().into_iter().any(|i| nodes[i].requires_grad),
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Nodes are visited in exact reverse recording order and gradients
    /// flowing into a shared input are summed. Every registered parameter
    /// gets a buffer, zero-filled if the loss does not depend on it.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss was recorded on another tape".into()));
        }
        let nodes = self.nodes.borrow();
        let seed_value = &nodes[loss.id].value;
        if seed_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed_value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(seed_value.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            for (input, g) in node.op.vjp(&nodes, &node.value, &upstream)? {
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // leaves keep their gradient for the caller
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(upstream);
            }
        }

        let params = self
            .params
            .borrow()
            .iter()
            .map(|(name, &id)| {
                let g = grads
                    .get(id)
                    .and_then(Clone::clone)
                    .unwrap_or_else(|| Tensor::zeros(nodes[id].value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { params, by_node: grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar = f32> {
    params: BTreeMap<String, Tensor<T>>,
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    /// Gradient reaching a leaf recorded with [`Tape::param`].
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(var.id).and_then(Option::as_ref)
    }
}
