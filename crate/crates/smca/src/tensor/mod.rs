//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is a row-major f64 buffer plus shape metadata. Tensors are
//! immutable; operations build new tensors. When an operand is attached to a
//! [`Tape`] (via [`Tape::watch`]) the operation records a backward closure so
//! [`Tape::backward`] can accumulate gradients in reverse order. Operations
//! on unattached tensors compute eagerly and record nothing, which doubles as
//! the inference / no-grad path.
//!
//! The tape is a per-forward-pass structure: `backward` drains it. Tensors
//! without tape handles are cheap to clone (shared `Arc` buffer) and safe to
//! share across threads; a tape itself is meant to stay on one thread.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradReport};

use crate::error::{Error, Result};
use std::sync::{Arc, Mutex};

/// Dense multi-dimensional array of f64 in row-major order.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, checking that `shape` and `data` agree.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::domain(
                "tensor",
                format!("zero-sized dimension in shape {shape:?}"),
            ));
        }
        if numel != data.len() {
            return Err(Error::Contract {
                op: "tensor",
                msg: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor::from_parts(shape, data, None))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeRef>) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite tensor values for shape {shape:?}"
        );
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![0.0; n], None)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![value; n], None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![1], vec![value], None)
    }

    /// Row-major matrix from nested slices; rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::contract("tensor", "ragged rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    /// Random tensor with i.i.d. N(0, std^2) entries.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut crate::rng::SplitMix64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor::from_parts(shape, data, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element (r, c) of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract {
                op: "item",
                msg: format!("expected one element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Replaces the buffer in place (optimizer updates). Panics if the new
    /// data length differs. The tensor must be detached.
    pub fn set_data(&mut self, data: Vec<f64>) {
        assert_eq!(data.len(), self.data.len(), "set_data length mismatch");
        assert!(self.node.is_none(), "set_data on a tracked tensor");
        debug_assert!(data.iter().all(|v| v.is_finite()));
        self.data = Arc::new(data);
    }
}

type BackFn = Box<dyn Fn(&[f64], &mut GradStore) + Send>;

struct NodeSlot {
    len: usize,
    back: Option<BackFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<NodeSlot>,
}

/// Records operations of one forward pass for reverse-mode differentiation.
#[derive(Clone)]
pub struct Tape {
    inner: Arc<Mutex<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Arc::new(Mutex::new(TapeInner::default())),
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `t` as a leaf and returns a tracked copy sharing its buffer.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push(t.numel(), None);
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub(crate) fn push(&self, len: usize, back: Option<BackFn>) -> usize {
        let mut inner = self.inner.lock().unwrap();
        inner.nodes.push(NodeSlot { len, back });
        inner.nodes.len() - 1
    }

    /// Reverse-mode accumulation from a scalar loss. Drains the tape: after
    /// this call the tape is empty and further backward calls on tensors
    /// recorded before it are an error.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Contract {
                op: "backward",
                msg: format!("loss must be scalar, shape is {:?}", loss.shape),
            });
        }
        let value = loss.data[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("backward loss".into()));
        }
        let node = loss.node.as_ref().ok_or_else(|| {
            Error::contract("backward", "loss is not attached to any tape")
        })?;
        if !self.same_tape(&node.tape) {
            return Err(Error::contract("backward", "loss belongs to a different tape"));
        }
        let nodes = std::mem::take(&mut self.inner.lock().unwrap().nodes);
        let mut store = GradStore {
            slots: nodes.iter().map(|_| None).collect(),
            lens: nodes.iter().map(|n| n.len).collect(),
        };
        store.slots[node.id] = Some(vec![1.0]);
        for i in (0..=node.id).rev() {
            let Some(grad) = store.slots[i].take() else {
                continue;
            };
            if let Some(back) = &nodes[i].back {
                back(&grad, &mut store);
            }
        }
        Ok(Gradients { store })
    }
}

/// Gradient buffers indexed by tape node id, filled during backward.
pub struct GradStore {
    slots: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl GradStore {
    /// Adds into the gradient slot of node `id`, allocating zeros on first use.
    pub(crate) fn accum(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        let slot = self.slots[id].get_or_insert_with(|| vec![0.0; self.lens[id]]);
        f(slot);
    }
}

/// Result of a backward pass.
pub struct Gradients {
    store: GradStore,
}

impl Gradients {
    /// Gradient with respect to `t`. Parameters that did not influence the
    /// loss get a zero gradient. `t` must have been watched on the drained
    /// tape.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let node = t
            .node
            .as_ref()
            .ok_or_else(|| Error::contract("gradients", "tensor is not attached to a tape"))?;
        match &self.store.slots[node.id] {
            Some(g) => Tensor::new(t.shape.to_vec(), g.clone()),
            None => Ok(Tensor::zeros(t.shape.to_vec())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn watch_shares_buffer_and_tracks() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let w = tape.watch(&t);
        assert!(w.is_tracked());
        assert!(!t.is_tracked());
        assert_eq!(w.data(), t.data());
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let err = tape.backward(&x).unwrap_err();
        assert!(matches!(err, Error::Contract { op: "backward", .. }));
    }

    #[test]
    fn grad_of_sum_is_ones_and_unused_params_zero() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let unused = tape.watch(&Tensor::new(vec![4], vec![2.0; 4]).unwrap());
        let loss = x.sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[1.0; 6]);
        assert_eq!(grads.wrt(&unused).unwrap().data(), &[0.0; 4]);
        // tape is drained afterwards
        assert!(tape.is_empty());
    }

    #[test]
    fn grad_of_square_at_three_is_six() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(3.0));
        let loss = x.mul(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn zero_sized_shape_rejected() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }
}
