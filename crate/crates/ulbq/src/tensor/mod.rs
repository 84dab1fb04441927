//! Reverse-mode autodiff over dense row-major tensors.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a node in an implicit compute
//! graph. Leaf tensors hold parameters or inputs; every op method
//! (`add`, `matmul`, `softmax`, …) records a new node that remembers its
//! parents. [`Tensor::backward`] walks the graph once in reverse
//! topological order and accumulates gradients into every reachable tensor
//! that requires them.
//!
//! Design notes:
//!
//! * Gradients **accumulate** across `backward` calls; callers zero them
//!   explicitly (`zero_grad`) between steps, which is what the optimizers
//!   in [`crate::optim`] do.
//! * Shape errors are programmer errors and panic with both shapes named.
//!   `backward` panics on a non-scalar loss.
//! * Everything is single-threaded and allocation-order deterministic: the
//!   same op sequence on the same data produces bit-identical results.
//! * The element type is generic: `f64` for tests and oracles, `f32`
//!   (the default) for training runs.

mod ops;

pub use ops::Op;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

// ── Element type ────────────────────────────────────────────────────────────

/// Floating-point element type for tensors (`f32` or `f64`).
///
/// `round` on both primitive types rounds half away from zero, which is the
/// tie rule used by every quantizer in this crate.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    /// Short dtype name recorded in artifacts ("f32"/"f64").
    const DTYPE: &'static str;

    /// Convert from an f64 literal (used for constants and test fixtures).
    fn lit(v: f64) -> Self;

    /// Widen to f64 (used by accumulation paths that must stay in 64-bit).
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

// ── Graph node ──────────────────────────────────────────────────────────────

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    /// For leaves this is togglable (freeze/unfreeze); op nodes fix it at
    /// recording time from their parents.
    requires_grad: Cell<bool>,
    op: Op<T>,
}

/// Handle onto a node of the autodiff graph. Cloning shares the node.
pub struct Tensor<T: Scalar = f32> {
    pub(crate) node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.node.requires_grad.get())
            .field("leaf", &self.is_leaf())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Tensor<T> {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "tensor: shape {:?} implies {} elements, got {}",
            shape,
            numel_of(&shape),
            data.len()
        );
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                op,
            }),
        }
    }

    // ── Constructors ────────────────────────────────────────────────────

    /// New leaf tensor with explicit contents.
    pub fn leaf(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Tensor<T> {
        assert!(numel_of(shape) > 0, "tensor: empty shape {shape:?} not supported");
        Tensor::from_parts(shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    /// Leaf filled with zeros.
    pub fn zeros(shape: &[usize], requires_grad: bool) -> Tensor<T> {
        Tensor::leaf(shape, vec![T::zero(); numel_of(shape)], requires_grad)
    }

    /// Leaf filled with a constant.
    pub fn full(shape: &[usize], v: T) -> Tensor<T> {
        Tensor::leaf(shape, vec![v; numel_of(shape)], false)
    }

    /// Rank-0 constant.
    pub fn scalar(v: T) -> Tensor<T> {
        Tensor::from_parts(vec![], vec![v], false, Op::Leaf)
    }

    /// Leaf from f64 values (convenient for fixtures and model init).
    pub fn from_f64(shape: &[usize], data: &[f64], requires_grad: bool) -> Tensor<T> {
        Tensor::leaf(shape, data.iter().map(|&v| T::lit(v)).collect(), requires_grad)
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    /// Borrow the underlying buffer read-only.
    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Copy the contents out.
    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Contents widened to f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    /// The single element of a rank-0/1-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item: tensor has shape {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    /// Overwrite the contents in place (same length required).
    pub fn set_data(&self, new: &[T]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data: length {} != {}", new.len(), d.len());
        d.copy_from_slice(new);
    }

    /// Mutate the contents in place.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        f(&mut self.node.data.borrow_mut())
    }

    /// Gradient accumulated by the last `backward` call(s), if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    /// Drop any accumulated gradient.
    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Freeze or unfreeze a leaf. Op nodes keep the flag they were recorded
    /// with; toggling them would falsify the recorded graph.
    pub fn set_requires_grad(&self, v: bool) {
        assert!(
            self.is_leaf(),
            "set_requires_grad: only leaves can be toggled (shape {:?})",
            self.shape()
        );
        self.node.requires_grad.set(v);
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.node.op, Op::Leaf)
    }

    /// Copy the values into a fresh constant leaf, cutting the graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_parts(self.node.shape.clone(), self.to_vec(), false, Op::Leaf)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients accumulate (`+=`) into every tensor on a differentiable
    /// path from a `requires_grad` leaf to this loss. Call `zero_grad` on
    /// the parameters (or reuse [`crate::optim::AdamW`], which does) before
    /// the next step. Panics if the loss is not a single element.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape()
        );
        if !self.node.requires_grad.get() {
            return; // nothing reachable wants a gradient
        }

        // Post-order DFS over the requires_grad subgraph.
        let order = self.topo_order();

        // Leaf gradients accumulate across sweeps (callers zero them);
        // intermediate gradients are scratch space for this sweep only.
        for t in &order {
            if !t.is_leaf() {
                *t.node.grad.borrow_mut() = None;
            }
        }

        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            ops::backward_step(t);
        }
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        // (node, next-parent-index) emulates recursion.
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((t, pi)) = stack.pop() {
            let parents = t.node.op.parents();
            if pi < parents.len() {
                let parent = parents[pi].clone();
                stack.push((t, pi + 1));
                if parent.node.requires_grad.get() && !visited.contains(&parent.node.id) {
                    visited.insert(parent.node.id);
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.node.grad.borrow()
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.node.op
    }
}
