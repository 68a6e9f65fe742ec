//! Explicit, scoped reverse-mode tape.
//!
//! A [`Tape`] records every operation whose inputs track gradients. One call
//! to [`Tape::backward`] consumes the recording; a second call is an error.
//! Create a fresh tape per forward/backward region.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Vector-Jacobian product: maps the output gradient to one optional
/// gradient per recorded input, in input order.
pub type Backward<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor owned by a layer.
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    pub value: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            id: ParamId::fresh(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

impl<T: Real> Clone for Param<T> {
    /// A clone is a distinct parameter with a new identity.
    fn clone(&self) -> Self {
        Param::new(self.value.clone())
    }
}

struct Node<T> {
    inputs: Vec<Option<NodeId>>,
    backward: Option<Backward<T>>,
}

struct State<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    consumed: bool,
}

pub struct Tape<T> {
    recording: bool,
    state: RefCell<State<T>>,
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let state = self.state.borrow();
        f.debug_struct("Tape")
            .field("recording", &self.recording)
            .field("nodes", &state.nodes.len())
            .field("consumed", &state.consumed)
            .finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records differentiable operations.
    pub fn new() -> Self {
        Tape {
            recording: true,
            state: RefCell::new(State {
                nodes: Vec::new(),
                params: HashMap::new(),
                consumed: false,
            }),
        }
    }

    /// A tape that never records; every value is a constant.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.state.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, inputs: Vec<Option<NodeId>>, backward: Option<Backward<T>>) -> NodeId {
        let mut state = self.state.borrow_mut();
        assert!(!state.consumed, "recording on a consumed tape");
        state.nodes.push(Node { inputs, backward });
        state.nodes.len() - 1
    }

    /// A leaf that requires gradients.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let node = self.recording.then(|| self.push(Vec::new(), None));
        Var {
            tape: self,
            node,
            value,
        }
    }

    /// A value excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            node: None,
            value,
        }
    }

    /// Binds a parameter as a leaf; repeated binds return the same node.
    pub fn param(&self, param: &Param<T>) -> Var<'_, T> {
        if !self.recording {
            return self.constant(param.value.clone());
        }
        let existing = self.state.borrow().params.get(&param.id).copied();
        let node = match existing {
            Some(node) => node,
            None => {
                let node = self.push(Vec::new(), None);
                self.state.borrow_mut().params.insert(param.id, node);
                node
            }
        };
        Var {
            tape: self,
            node: Some(node),
            value: param.value.clone(),
        }
    }

    /// Records an operation. `backward` is dropped unused when no input
    /// tracks gradients.
    pub fn record<'t>(
        &'t self,
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        for v in inputs {
            assert!(std::ptr::eq(v.tape, self), "operands recorded on different tapes");
        }
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        let node = tracked.then(|| {
            self.push(
                inputs.iter().map(|v| v.node).collect(),
                Some(Box::new(backward)),
            )
        });
        Var {
            tape: self,
            node,
            value,
        }
    }

    /// Propagates from a scalar `loss`, consuming the recording.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let mut state = self.state.borrow_mut();
        if state.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let root = loss.node.ok_or(TensorError::Untracked)?;
        state.consumed = true;
        let mut nodes = std::mem::take(&mut state.nodes);
        let params = std::mem::take(&mut state.params);
        drop(state);

        let mut pending: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        pending[root] = Some(Tensor::ones(loss.value.shape().to_vec()));
        let mut leaves = HashMap::new();
        nodes.truncate(root + 1);
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(grad) = pending[id].take() else {
                continue;
            };
            match node.backward {
                None => {
                    leaves.insert(id, grad);
                }
                Some(backward) => {
                    let input_grads = backward(&grad);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (input, g) in node.inputs.iter().zip(input_grads) {
                        let (Some(input), Some(g)) = (*input, g) else {
                            continue;
                        };
                        match &mut pending[input] {
                            Some(acc) => acc.add_assign(&g).expect("gradient shape"),
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<NodeId, Tensor<T>>,
    params: HashMap<ParamId, NodeId>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created by [`Tape::leaf`] or [`Tape::param`].
    /// `None` when the loss does not depend on it.
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.node.and_then(|n| self.leaves.get(&n))
    }

    pub fn param(&self, param: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&param.id).and_then(|n| self.leaves.get(n))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// A tensor value flowing through a tape.
#[derive(Clone)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) node: Option<NodeId>,
    pub(crate) value: Tensor<T>,
}

impl<T: fmt::Debug> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("value", &self.value)
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rank(&self) -> usize {
        self.value.rank()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value.clone())
    }

    /// A constant on the same tape.
    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_backward_is_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([3]));
        let loss = x.sum();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([3]));
        assert!(matches!(tape.backward(&x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2], &[1.0, -2.0]).unwrap());
        let y = x.add(&x).unwrap().add(&x).unwrap();
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap().to_f64_vec(), vec![3.0, 3.0]);
    }

    #[test]
    fn param_binds_once() {
        let tape = Tape::<f64>::new();
        let p = Param::new(Tensor::full([2], 2.0));
        let a = tape.param(&p);
        let b = tape.param(&p);
        let loss = a.mul(&b).unwrap().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.param(&p).unwrap().to_f64_vec(), vec![4.0, 4.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::ones([4]));
        let y = x.relu().scale(2.0);
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }
}
