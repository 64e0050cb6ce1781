//! Reverse-mode gradient tape.
//!
//! Forward ops push one backward closure each, in execution order. Replaying
//! the closures in reverse visits the graph in reverse topological order, so
//! every tensor's gradient is complete before its producing op consumes it.
//! A tensor read by k ops receives the sum of k contributions.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor, TensorId};

type BackFn<E> = Box<dyn FnOnce(&mut Gradients<E>)>;

/// Recording context for one forward/backward pass. Not thread-safe by
/// design; concurrent batches each get their own tape.
pub struct Tape<E: Elem> {
    entries: RefCell<Vec<BackFn<E>>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl<E: Elem> Tape<E> {
    /// Tape that records backward closures.
    pub fn new() -> Self {
        Self {
            entries: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// Tape that records nothing; forward results carry `requires_grad = false`.
    pub fn inference() -> Self {
        Self {
            entries: RefCell::new(Vec::new()),
            recording: false,
            consumed: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub(crate) fn record(&self, f: BackFn<E>) {
        self.entries.borrow_mut().push(f);
    }

    /// Build an op output; gradient tracking only when recording and some
    /// input requires it.
    pub(crate) fn output(&self, shape: Vec<usize>, data: Vec<E>, any_input_grad: bool) -> Tensor<E> {
        Tensor::new_node(shape, data, any_input_grad && self.recording)
    }

    pub fn num_ops(&self) -> usize {
        self.entries.borrow().len()
    }
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulator keyed by tensor id. After `backward` it holds the
/// gradients of the leaf tensors (parameters and graph inputs).
#[derive(Debug, Default)]
pub struct Gradients<E: Elem> {
    map: HashMap<u64, Vec<E>>,
}

impl<E: Elem> Gradients<E> {
    pub fn new() -> Self {
        Self { map: HashMap::new() }
    }

    pub fn of(&self, param: &Param<E>) -> Option<&[E]> {
        self.map.get(&param.id().0).map(|v| v.as_slice())
    }

    pub fn of_id(&self, id: TensorId) -> Option<&[E]> {
        self.map.get(&id.0).map(|v| v.as_slice())
    }

    pub fn contains(&self, id: TensorId) -> bool {
        self.map.contains_key(&id.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Remove and return the gradient for `id`. Used by each op for its own
    /// output: once the producing op has run, that gradient is dead.
    pub(crate) fn take(&mut self, id: TensorId) -> Option<Vec<E>> {
        self.map.remove(&id.0)
    }

    pub(crate) fn seed(&mut self, id: TensorId, value: Vec<E>) {
        self.map.insert(id.0, value);
    }

    /// Accumulate a contribution (sum over consumers).
    pub(crate) fn accumulate(&mut self, id: TensorId, contribution: Vec<E>) {
        match self.map.get_mut(&id.0) {
            Some(existing) => {
                debug_assert_eq!(existing.len(), contribution.len());
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            None => {
                self.map.insert(id.0, contribution);
            }
        }
    }
}

/// Run the recorded tape backward from a scalar loss. Consumes the recorded
/// ops; calling again without a new forward pass is an error.
pub fn backward<E: Elem>(tape: &Tape<E>, loss: &Tensor<E>) -> Result<Gradients<E>> {
    if loss.len() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::Contract(
            "loss was not produced by tape-recorded operations".into(),
        ));
    }
    if tape.consumed.replace(true) {
        return Err(Error::Contract(
            "backward already consumed this tape; run a new forward pass".into(),
        ));
    }
    let entries = std::mem::take(&mut *tape.entries.borrow_mut());
    let mut grads = Gradients::new();
    grads.seed(loss.id(), vec![E::one()]);
    for entry in entries.into_iter().rev() {
        entry(&mut grads);
    }
    Ok(grads)
}
