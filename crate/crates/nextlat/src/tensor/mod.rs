//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The engine is deliberately small: it provides exactly the operations the
//! transformer, the latent-dynamics objectives, and the probes need, in two
//! precisions (`f64` for oracle/gradient-check work, `f32` for training
//! throughput). Values are immutable after construction; only gradient
//! buffers mutate. One tape is single-threaded; independent tapes may live
//! on independent threads.
//!
//! Shape mismatches and misuse of the tape are programming errors and panic
//! with messages naming both shapes. Data-dependent failures (out-of-vocab
//! ids, an all-masked loss, a non-scalar backward root) return [`Error`].

mod element;
mod gradcheck;
mod kernels;
mod ops;

pub use element::Element;
pub use gradcheck::{grad_check, grad_check_named, CheckReport};
pub use ops::kl_div;

use crate::error::Error;
use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

/// Index of an operation record on a tape. Leaves and detached values have
/// no node id; only op outputs do.
pub type NodeId = usize;

type GradCell<E> = Rc<RefCell<Vec<E>>>;

/// Where a recorded operation routes the gradient for one of its inputs.
enum ParentRef<E> {
    /// An interior node: gradient goes to that record's transient buffer.
    Node(NodeId, usize),
    /// A leaf: gradient accumulates into the leaf's persistent buffer.
    Leaf(GradCell<E>),
    /// A constant or detached input: gradient is dropped.
    Stop,
}

type BackwardFn<E> = Box<dyn Fn(&[E], &mut GradSink<'_, E>)>;

/// One recorded operation: where its input gradients go and how to compute
/// them from the output gradient.
struct Record<E: Element> {
    parents: Vec<ParentRef<E>>,
    backward: BackwardFn<E>,
}

/// Hands backward rules mutable access to the gradient buffers of the
/// inputs they are differentiating into.
pub struct GradSink<'a, E: Element> {
    parents: &'a [ParentRef<E>],
    node_grads: &'a mut [Option<Vec<E>>],
}

impl<E: Element> GradSink<'_, E> {
    /// Whether input `i` is tracked at all. Backward rules should skip the
    /// work for inputs that are not.
    pub fn wants(&self, i: usize) -> bool {
        !matches!(self.parents[i], ParentRef::Stop)
    }

    /// Accumulate into the gradient buffer of input `i`. The closure must
    /// add, never overwrite: several consumers may feed the same buffer.
    pub fn accum(&mut self, i: usize, f: impl FnOnce(&mut [E])) {
        match &self.parents[i] {
            ParentRef::Node(id, len) => {
                f(self.node_grads[*id].get_or_insert_with(|| vec![E::ZERO; *len]))
            }
            ParentRef::Leaf(cell) => f(&mut cell.borrow_mut()),
            ParentRef::Stop => {}
        }
    }
}

struct TapeInner<E: Element> {
    records: Vec<Record<E>>,
    leaves: Vec<GradCell<E>>,
}

/// The computation record. Records are appended in forward order, so the
/// list is already topologically sorted; backward replays it in reverse and
/// visits each node at most once.
pub struct Tape<E: Element> {
    inner: RefCell<TapeInner<E>>,
    epoch: Cell<u64>,
    active: Cell<bool>,
}

/// Re-enables recording when dropped.
pub struct PauseGuard<'a, E: Element> {
    tape: &'a Tape<E>,
    prev: bool,
}

impl<E: Element> Drop for PauseGuard<'_, E> {
    fn drop(&mut self) {
        self.tape.active.set(self.prev);
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Rc<Self> {
        Rc::new(Tape {
            inner: RefCell::new(TapeInner { records: Vec::new(), leaves: Vec::new() }),
            epoch: Cell::new(0),
            active: Cell::new(true),
        })
    }

    /// Suspend recording (evaluation mode): ops over tracked tensors produce
    /// detached values until the guard drops.
    pub fn pause(&self) -> PauseGuard<'_, E> {
        let prev = self.active.get();
        self.active.set(false);
        PauseGuard { tape: self, prev }
    }

    fn push_record(&self, rec: Record<E>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.records.push(rec);
        inner.records.len() - 1
    }

    fn register_leaf(&self, cell: GradCell<E>) {
        self.inner.borrow_mut().leaves.push(cell);
    }

    /// Number of op records currently on the tape.
    pub fn len(&self) -> usize {
        self.inner.borrow().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all op records (leaf registrations persist) and invalidate every
    /// tensor that referenced them. Called once per training step after the
    /// optimizer has consumed the gradients.
    pub fn reset(&self) {
        self.inner.borrow_mut().records.clear();
        self.epoch.set(self.epoch.get() + 1);
    }

    /// Zero every registered leaf gradient buffer. Gradient accumulation is
    /// additive; this is the explicit clearing step.
    pub fn zero_grads(&self) {
        for cell in &self.inner.borrow().leaves {
            for g in cell.borrow_mut().iter_mut() {
                *g = E::ZERO;
            }
        }
    }

    /// Reverse sweep from a scalar loss. Populates the grad buffers of all
    /// reachable leaves, accumulating (`+=`) into whatever they already hold.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<(), Error> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(format!("{:?}", loss.shape())));
        }
        let root = match &loss.track {
            Track::Node { id, epoch, .. } => {
                assert_eq!(
                    *epoch,
                    self.epoch.get(),
                    "backward through a tensor from a reset tape epoch"
                );
                *id
            }
            // A constant scalar has no dependencies; nothing to do.
            Track::Constant => return Ok(()),
            Track::Leaf { grad, .. } => {
                grad.borrow_mut()[0] += E::ONE;
                return Ok(());
            }
        };
        let inner = self.inner.borrow();
        let records = &inner.records;

        // Reachability pass: only nodes that feed the loss get visited.
        let mut needed = vec![false; root + 1];
        needed[root] = true;
        for id in (0..=root).rev() {
            if !needed[id] {
                continue;
            }
            for p in &records[id].parents {
                if let ParentRef::Node(pid, _) = p {
                    needed[*pid] = true;
                }
            }
        }

        let mut node_grads: Vec<Option<Vec<E>>> = Vec::with_capacity(root + 1);
        node_grads.resize_with(root + 1, || None);
        node_grads[root] = Some(vec![E::ONE]);

        for id in (0..=root).rev() {
            if !needed[id] {
                continue;
            }
            let Some(gout) = node_grads[id].take() else { continue };
            let rec = &records[id];
            let mut sink = GradSink { parents: &rec.parents, node_grads: &mut node_grads };
            (rec.backward)(&gout, &mut sink);
        }
        Ok(())
    }
}

enum Track<E: Element> {
    Constant,
    Leaf { tape: Rc<Tape<E>>, grad: GradCell<E> },
    Node { tape: Rc<Tape<E>>, id: NodeId, epoch: u64 },
}

impl<E: Element> Clone for Track<E> {
    fn clone(&self) -> Self {
        match self {
            Track::Constant => Track::Constant,
            Track::Leaf { tape, grad } => {
                Track::Leaf { tape: Rc::clone(tape), grad: Rc::clone(grad) }
            }
            Track::Node { tape, id, epoch } => {
                Track::Node { tape: Rc::clone(tape), id: *id, epoch: *epoch }
            }
        }
    }
}

/// An n-dimensional array of `E` with an optional attachment to a tape.
/// Cloning is cheap (shared storage). Values never mutate; the optimizer
/// replaces a parameter's storage wholesale between steps.
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Rc<Vec<E>>,
    track: Track<E>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Rc::clone(&self.data), track: self.track.clone() }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.track {
            Track::Constant => "const",
            Track::Leaf { .. } => "leaf",
            Track::Node { .. } => "node",
        };
        write!(f, "Tensor<{}>({:?}, {})", E::DTYPE, self.shape, kind)
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    /// Untracked tensor from raw data.
    pub fn constant(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            numel_of(shape),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data: Rc::new(data), track: Track::Constant }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(shape, vec![E::ZERO; numel_of(shape)])
    }

    pub fn scalar(v: E) -> Self {
        Tensor::constant(&[], vec![v])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Tensor::constant(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    /// Trainable leaf: registers a persistent, zero-initialized gradient
    /// buffer on the tape. Leaves have no tape node; backward routes into
    /// the buffer directly.
    pub fn param(tape: &Rc<Tape<E>>, shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            numel_of(shape),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let grad: GradCell<E> = Rc::new(RefCell::new(vec![E::ZERO; data.len()]));
        tape.register_leaf(Rc::clone(&grad));
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            track: Track::Leaf { tape: Rc::clone(tape), grad },
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        !matches!(self.track, Track::Constant)
    }

    /// Tape node id; `None` for leaves and detached values.
    pub fn tape_node(&self) -> Option<NodeId> {
        match &self.track {
            Track::Node { id, .. } => Some(*id),
            _ => None,
        }
    }

    /// A copy of the accumulated gradient, for leaves. Interior nodes keep
    /// no persistent gradient.
    pub fn grad(&self) -> Option<Vec<E>> {
        match &self.track {
            Track::Leaf { grad, .. } => Some(grad.borrow().clone()),
            _ => None,
        }
    }

    pub fn zero_grad(&self) {
        if let Track::Leaf { grad, .. } = &self.track {
            for g in grad.borrow_mut().iter_mut() {
                *g = E::ZERO;
            }
        }
    }

    /// Same values, no tape attachment: backward through the result
    /// contributes nothing upstream. Idempotent.
    pub fn detach(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Rc::clone(&self.data), track: Track::Constant }
    }

    /// View with a new shape over the same storage (and the same tape node:
    /// gradients are flat, so no record is needed).
    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Tensor { shape: shape.to_vec(), data: Rc::clone(&self.data), track: self.track.clone() }
    }

    fn tape_of(&self) -> Option<&Rc<Tape<E>>> {
        match &self.track {
            Track::Constant => None,
            Track::Leaf { tape, .. } => Some(tape),
            Track::Node { tape, .. } => Some(tape),
        }
    }

    /// Parent reference for recording this tensor as an op input.
    fn parent_ref(&self) -> ParentRef<E> {
        match &self.track {
            Track::Constant => ParentRef::Stop,
            Track::Leaf { grad, .. } => ParentRef::Leaf(Rc::clone(grad)),
            Track::Node { id, epoch, tape } => {
                assert_eq!(
                    *epoch,
                    tape.epoch.get(),
                    "use of a tensor from a reset tape epoch"
                );
                ParentRef::Node(*id, self.numel())
            }
        }
    }

    /// Mutable access to the underlying storage for the optimizer. Clones
    /// the buffer if anything else still shares it.
    pub(crate) fn data_make_mut(&mut self) -> &mut Vec<E> {
        Rc::make_mut(&mut self.data)
    }
}

/// Resolve the common tape of an op's inputs, if any input is tracked.
/// Mixing tensors from two different tapes is a programming error.
fn joint_tape<'a, E: Element>(inputs: &[&'a Tensor<E>]) -> Option<&'a Rc<Tape<E>>> {
    let mut found: Option<&Rc<Tape<E>>> = None;
    for t in inputs {
        if let Some(tape) = t.tape_of() {
            match found {
                None => found = Some(tape),
                Some(prev) => {
                    assert!(Rc::ptr_eq(prev, tape), "op inputs live on different tapes")
                }
            }
        }
    }
    found
}

/// Record an op output. `backward` receives the output gradient and a sink
/// for the inputs, in the order given here.
fn make_output<E: Element>(
    inputs: &[&Tensor<E>],
    shape: Vec<usize>,
    data: Vec<E>,
    backward: BackwardFn<E>,
) -> Tensor<E> {
    make_output_rc(inputs, shape, Rc::new(data), backward)
}

fn make_output_rc<E: Element>(
    inputs: &[&Tensor<E>],
    shape: Vec<usize>,
    data: Rc<Vec<E>>,
    backward: BackwardFn<E>,
) -> Tensor<E> {
    debug_assert_eq!(numel_of(&shape), data.len());
    match joint_tape(inputs) {
        Some(tape) if tape.active.get() => {
            let parents = inputs.iter().map(|t| t.parent_ref()).collect();
            let id = tape.push_record(Record { parents, backward });
            Tensor {
                shape,
                data,
                track: Track::Node { tape: Rc::clone(tape), id, epoch: tape.epoch.get() },
            }
        }
        _ => Tensor { shape, data, track: Track::Constant },
    }
}

pub use self::ops::TokenBatch;
