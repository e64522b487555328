//! Reverse-mode automatic differentiation on dense row-major tensors.
//!
//! A [`Tape`] owns an append-only graph of nodes. Every op records its output
//! value plus a backward closure that scatters the output gradient to the
//! op's parents. Node ids grow in creation order, which is already a valid
//! topological order, so [`backward`] is a single reverse sweep that visits
//! each node exactly once and sums contributions when a node feeds several
//! consumers.
//!
//! All reductions (dot products, sums, pooling) accumulate sequentially left
//! to right, so forward and backward passes are bitwise deterministic for
//! identical inputs. The element type is generic: `f32` for training and
//! benchmarks, `f64` for gradient verification.

mod checkpoint;
pub mod gradcheck;
pub mod linalg;
mod ops;
mod optim;
mod spatial;

pub use checkpoint::{read_checkpoint, read_checkpoint_bytes, write_checkpoint, write_checkpoint_bytes};
pub use gradcheck::{grad_check, grad_check_all, GradCheckCase};
pub use ops::concat;
pub use optim::{adamw_step, AdamW, LrSchedule};
pub use spatial::patchify;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type of a tape: `f32` for training, `f64` for verification.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    /// Dtype tag used in checkpoint files (0 = f32, 1 = f64).
    const DTYPE_TAG: u8;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 0;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE_TAG: u8 = 1;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E], &mut Grads<E>)>;

struct Node<E: Scalar> {
    value: Rc<Vec<E>>,
    shape: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackwardFn<E>>,
}

struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
}

/// Append-only autodiff graph. Cheap to clone (shared handle).
pub struct Tape<E: Scalar> {
    inner: Rc<RefCell<Graph<E>>>,
}

impl<E: Scalar> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Tape`].
pub struct Tensor<E: Scalar> {
    tape: Tape<E>,
    id: usize,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Graph { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        value: Rc<Vec<E>>,
        shape: Vec<usize>,
        needs_grad: bool,
        backward: Option<BackwardFn<E>>,
    ) -> Tensor<E> {
        debug_assert_eq!(value.len(), numel(&shape));
        let mut g = self.inner.borrow_mut();
        g.nodes.push(Node {
            value,
            shape,
            needs_grad,
            backward,
        });
        Tensor {
            tape: self.clone(),
            id: g.nodes.len() - 1,
        }
    }

    /// Differentiable input (parameter) node.
    pub fn leaf(&self, data: Vec<E>, shape: &[usize]) -> Result<Tensor<E>> {
        self.input(data, shape, true)
    }

    /// Non-differentiable input node.
    pub fn constant(&self, data: Vec<E>, shape: &[usize]) -> Result<Tensor<E>> {
        self.input(data, shape, false)
    }

    /// Constant that shares an existing buffer (no copy).
    pub fn constant_shared(&self, data: Rc<Vec<E>>, shape: &[usize]) -> Result<Tensor<E>> {
        if data.len() != numel(shape) {
            return Err(Error::dims("constant", &[data.len()], shape));
        }
        Ok(self.push(data, shape.to_vec(), false, None))
    }

    fn input(&self, data: Vec<E>, shape: &[usize], needs_grad: bool) -> Result<Tensor<E>> {
        if data.len() != numel(shape) {
            return Err(Error::dims("input", &[data.len()], shape));
        }
        Ok(self.push(Rc::new(data), shape.to_vec(), needs_grad, None))
    }

    pub fn scalar(&self, v: E) -> Tensor<E> {
        self.push(Rc::new(vec![v]), vec![1], false, None)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<E> {
        self.push(
            Rc::new(vec![E::zero(); numel(shape)]),
            shape.to_vec(),
            false,
            None,
        )
    }

    fn same_tape(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> Tape<E> {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    /// Shared handle to the value buffer (no copy).
    pub fn value(&self) -> Rc<Vec<E>> {
        Rc::clone(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.value().as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        let v = self.value();
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    /// Same buffer, re-registered as a constant: gradients stop here.
    pub fn detach(&self) -> Tensor<E> {
        let (value, shape) = {
            let g = self.tape.inner.borrow();
            let n = &g.nodes[self.id];
            (Rc::clone(&n.value), n.shape.clone())
        };
        self.tape.push(value, shape, false, None)
    }

    pub fn is_finite(&self) -> bool {
        self.value().iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_tape(&self, other: &Tensor<E>) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(
                "tensors belong to different tapes".into(),
            ))
        }
    }
}

/// Per-node gradient buffers produced by [`backward`].
pub struct Grads<E: Scalar> {
    slots: Vec<Option<Vec<E>>>,
    needs: Vec<bool>,
}

impl<E: Scalar> Grads<E> {
    /// Accumulate into the gradient of node `id` (len-checked, lazily zeroed).
    /// No-op for nodes that do not require gradients.
    pub(crate) fn add(&mut self, id: usize, len: usize, contrib: impl FnOnce(&mut [E])) {
        if !self.needs[id] {
            return;
        }
        let slot = self.slots[id].get_or_insert_with(|| vec![E::zero(); len]);
        debug_assert_eq!(slot.len(), len);
        contrib(slot);
    }

    pub fn get(&self, t: &Tensor<E>) -> Option<&[E]> {
        self.slots.get(t.id).and_then(|s| s.as_deref())
    }

    /// Gradient of a tensor, zeros if it never received contributions.
    pub fn get_or_zero(&self, t: &Tensor<E>) -> Vec<E> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![E::zero(); t.numel()],
        }
    }
}

/// Reverse sweep from a scalar loss. Returns gradients for every leaf that
/// requires them; intermediate gradients are freed as soon as they are
/// consumed. Visits each node at most once, in reverse creation order.
pub fn backward<E: Scalar>(loss: &Tensor<E>) -> Result<Grads<E>> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.needs_grad() {
        return Err(Error::Contract(
            "backward on a tensor with no differentiable ancestors".into(),
        ));
    }

    let graph = loss.tape.inner.borrow();
    let n = loss.id + 1;
    let mut grads = Grads {
        slots: vec![None; n],
        needs: graph.nodes[..n].iter().map(|nd| nd.needs_grad).collect(),
    };
    grads.slots[loss.id] = Some(vec![E::one()]);

    for id in (0..n).rev() {
        if grads.slots[id].is_none() {
            continue;
        }
        let node = &graph.nodes[id];
        if let Some(back) = &node.backward {
            // Take the buffer: interior gradients are not retained.
            let g = grads.slots[id].take().unwrap();
            back(&g, &mut grads);
        }
        // Nodes without a backward fn are leaves; their gradient stays.
    }
    Ok(grads)
}

/// Named persistent parameters, ordered by name for determinism.
#[derive(Debug, Clone)]
pub struct Param<E: Scalar> {
    pub data: Vec<E>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Scalar> {
    map: BTreeMap<String, Param<E>>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<E>) {
        debug_assert_eq!(data.len(), numel(shape));
        self.map.insert(
            name.into(),
            Param {
                data,
                shape: shape.to_vec(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param<E>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<E>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<E>> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<E>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<E>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn leaves(&self, tape: &Tape<E>) -> Result<ParamLeaves<E>> {
        let mut map = BTreeMap::new();
        for (name, p) in &self.map {
            map.insert(name.clone(), tape.leaf(p.data.clone(), &p.shape)?);
        }
        Ok(ParamLeaves { map })
    }

    /// Register every parameter as a constant: forwards run, backward skips.
    pub fn constant_leaves(&self, tape: &Tape<E>) -> Result<ParamLeaves<E>> {
        let mut map = BTreeMap::new();
        for (name, p) in &self.map {
            map.insert(name.clone(), tape.constant(p.data.clone(), &p.shape)?);
        }
        Ok(ParamLeaves { map })
    }

    /// Element-wise conversion, used to run f32 models under f64 verification.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in &self.map {
            out.insert(
                name.clone(),
                &p.shape,
                p.data
                    .iter()
                    .map(|&v| T::from_f64(Scalar::to_f64(v)))
                    .collect(),
            );
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.map
            .values()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Tape-registered leaves of a [`ParamStore`], keyed by parameter name.
pub struct ParamLeaves<E: Scalar> {
    map: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> ParamLeaves<E> {
    pub fn get(&self, name: &str) -> Result<Tensor<E>> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.map.iter()
    }

    /// Gradients of every parameter leaf, in name order.
    pub fn grads(&self, grads: &Grads<E>) -> BTreeMap<String, Vec<E>> {
        self.map
            .iter()
            .map(|(n, t)| (n.clone(), grads.get_or_zero(t)))
            .collect()
    }
}
