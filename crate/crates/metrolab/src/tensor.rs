//! Dense tensors and named trainable parameters.
//!
//! A `Tensor` is an immutable n-dimensional value. Identity (not the data)
//! is what gradients are keyed by: every tensor gets a process-unique id,
//! and a `Param` hands out leaf tensors that reuse its fixed id, so a
//! parameter used in several places accumulates one summed gradient.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::elem::Elem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

/// Immutable dense tensor, row-major.
#[derive(Debug, Clone)]
pub struct Tensor<E: Elem> {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
}

impl<E: Elem> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn scalar(x: E) -> Self {
        Self::from_vec(vec![1], vec![x]).unwrap()
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![E::zero(); numel]).unwrap()
    }

    pub fn full(shape: Vec<usize>, x: E) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![x; numel]).unwrap()
    }

    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let data = (0..numel).map(|_| E::from_f64(dist.sample(rng))).collect();
        Self::from_vec(shape, data).unwrap()
    }

    pub(crate) fn new_node(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
        }
    }

    pub(crate) fn leaf_with_id(id: TensorId, shape: Vec<usize>, data: Arc<Vec<E>>) -> Self {
        Self {
            id,
            shape,
            data,
            requires_grad: true,
        }
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Extract the single element of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Named trainable parameter. The value can be swapped by the optimizer;
/// tensors handed out by `leaf()` snapshot the current value but keep the
/// parameter's stable id so gradients land in one bucket.
#[derive(Debug)]
pub struct Param<E: Elem> {
    id: TensorId,
    name: String,
    shape: Vec<usize>,
    data: RwLock<Arc<Vec<E>>>,
}

impl<E: Elem> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Self {
            id: fresh_id(),
            name: name.into(),
            shape: value.shape().to_vec(),
            data: RwLock::new(value.data_arc()),
        }
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Leaf tensor carrying the parameter's stable id and current value.
    pub fn leaf(&self) -> Tensor<E> {
        let data = Arc::clone(&self.data.read().unwrap());
        Tensor::leaf_with_id(self.id, self.shape.clone(), data)
    }

    pub fn value(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data.read().unwrap())
    }

    pub fn set_value(&self, value: Vec<E>) {
        assert_eq!(value.len(), self.numel(), "param {} size mismatch", self.name);
        *self.data.write().unwrap() = Arc::new(value);
    }

    /// Mutate the value in place (copy-on-write if older snapshots are alive).
    pub fn update<F: FnOnce(&mut [E])>(&self, f: F) {
        let mut guard = self.data.write().unwrap();
        let data = Arc::make_mut(&mut guard);
        f(data.as_mut_slice());
    }
}

/// Ordered registry of parameters. Iteration order is construction order,
/// which is fixed by the model-building code, so optimizer passes are
/// deterministic.
#[derive(Debug, Default)]
pub struct ParamSet<E: Elem> {
    params: Vec<Arc<Param<E>>>,
}

impl<E: Elem> ParamSet<E> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<E>) -> Arc<Param<E>> {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let p = Arc::new(Param::new(name, value));
        self.params.push(Arc::clone(&p));
        p
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Param<E>>> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Param<E>>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}
