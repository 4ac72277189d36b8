//! Dense rank-5 tensors with reverse-mode automatic differentiation.
//!
//! The op set is exactly what the motion networks need: 3D convolution,
//! pixel shuffling, the stochastic binarizer, pointwise activations,
//! concatenation/slicing and the scalar reductions used as losses. Graphs are
//! built eagerly; [`Tensor5::backward`] walks them once in reverse topological
//! order. A graph lives on one thread (handles are `Rc`-based); parallelism
//! happens inside the convolution kernels, over output channels, with a fixed
//! per-element reduction order so results are independent of worker count.

mod checkpoint;
mod gradcheck;
mod ops;
mod optim;
mod params;

pub use checkpoint::{load_params, save_params, CHECKPOINT_MAGIC};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::BinarizeMode;
pub use optim::{AdamState, LrSchedule};
pub use params::ParamSet;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tensor geometry: (batch, channel, time, height, width), row-major with
/// `w` fastest. Convolution weights reuse the same rank-5 layout as
/// (out_ch, in_ch, kt, kh, kw).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Self {
        Shape5 { n, c, t, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        (((n * self.c + c) * self.t + t) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{},{})", self.n, self.c, self.t, self.h, self.w)
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn<S> = Box<dyn FnOnce(Vec<S>, &Tensor5<S>, &[Tensor5<S>])>;

struct Inner<S: Scalar> {
    id: u64,
    shape: Shape5,
    values: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    parents: Vec<Tensor5<S>>,
    backward: Option<BackwardFn<S>>,
    backward_done: bool,
}

/// A shared handle to one node of the computation graph.
pub struct Tensor5<S: Scalar>(Rc<RefCell<Inner<S>>>);

impl<S: Scalar> Clone for Tensor5<S> {
    fn clone(&self) -> Self {
        Tensor5(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor5<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        write!(
            f,
            "Tensor5{} id={} needs_grad={}",
            inner.shape, inner.id, inner.needs_grad
        )
    }
}

impl<S: Scalar> Tensor5<S> {
    fn new_inner(
        shape: Shape5,
        values: Vec<S>,
        needs_grad: bool,
        parents: Vec<Tensor5<S>>,
        backward: Option<BackwardFn<S>>,
    ) -> Self {
        debug_assert_eq!(values.len(), shape.numel());
        Tensor5(Rc::new(RefCell::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            values,
            grad: None,
            needs_grad,
            parents,
            backward,
            backward_done: false,
        })))
    }

    /// A trainable leaf: gradients accumulate here during backward.
    pub fn param(shape: Shape5, values: Vec<S>) -> Self {
        Tensor5::new_inner(shape, values, true, Vec::new(), None)
    }

    /// A non-trainable leaf (inputs, targets).
    pub fn constant(shape: Shape5, values: Vec<S>) -> Self {
        Tensor5::new_inner(shape, values, false, Vec::new(), None)
    }

    pub fn zeros(shape: Shape5) -> Self {
        Tensor5::constant(shape, vec![S::zero(); shape.numel()])
    }

    pub fn scalar(v: S) -> Self {
        Tensor5::constant(Shape5::new(1, 1, 1, 1, 1), vec![v])
    }

    /// Derived node; `backward` receives (upstream grad, this node, parents).
    /// Public within the crate so modules with bespoke backward rules (the
    /// bit-mask straight-through, the flow-consistency loss) can extend the
    /// op set.
    pub(crate) fn from_op(
        shape: Shape5,
        values: Vec<S>,
        parents: Vec<Tensor5<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let track = parents.iter().any(|p| p.needs_grad());
        if track {
            Tensor5::new_inner(shape, values, true, parents, Some(backward))
        } else {
            Tensor5::new_inner(shape, values, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.borrow().id
    }

    pub fn shape(&self) -> Shape5 {
        self.0.borrow().shape
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().shape.numel()
    }

    pub fn needs_grad(&self) -> bool {
        self.0.borrow().needs_grad
    }

    /// Borrow the value buffer without copying.
    pub fn values(&self) -> Ref<'_, [S]> {
        Ref::map(self.0.borrow(), |i| i.values.as_slice())
    }

    pub fn value_vec(&self) -> Vec<S> {
        self.0.borrow().values.clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> S {
        let inner = self.0.borrow();
        assert_eq!(inner.values.len(), 1, "item() on non-scalar tensor");
        inner.values[0]
    }

    /// Overwrite values in place (optimizer updates, finite differences).
    pub fn set_values(&self, values: Vec<S>) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(values.len(), inner.shape.numel());
        inner.values = values;
    }

    pub fn grad_vec(&self) -> Option<Vec<S>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub(crate) fn accum_grad(&self, delta: Vec<S>) {
        let mut inner = self.0.borrow_mut();
        if !inner.needs_grad {
            return;
        }
        match &mut inner.grad {
            None => inner.grad = Some(delta),
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
        }
    }

    fn parents(&self) -> Vec<Tensor5<S>> {
        self.0.borrow().parents.clone()
    }

    /// Reverse-mode gradient sweep from a scalar loss. Gradients accumulate
    /// on every reachable tensor with `needs_grad`; interior activations are
    /// released as the sweep passes them. One sweep per forward graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape("backward root", self.shape(), "(1,1,1,1,1)"));
        }
        {
            let mut inner = self.0.borrow_mut();
            if inner.backward_done {
                return Err(Error::State(
                    "backward() called twice on the same graph; rebuild the forward pass".into(),
                ));
            }
            inner.backward_done = true;
        }

        let order = self.topo_order();
        self.accum_grad_raw(vec![S::one()]);
        for node in order.iter().rev() {
            let (f, grad, parents) = {
                let mut inner = node.0.borrow_mut();
                if inner.backward.is_none() {
                    continue; // leaf: gradient stays for the optimizer
                }
                let f = inner.backward.take();
                let grad = inner.grad.take();
                let parents = std::mem::take(&mut inner.parents);
                (f, grad, parents)
            };
            if let (Some(f), Some(grad)) = (f, grad) {
                f(grad, node, &parents);
            }
        }
        Ok(())
    }

    fn accum_grad_raw(&self, delta: Vec<S>) {
        // root seeding ignores needs_grad so constants can be differentiated through
        let mut inner = self.0.borrow_mut();
        match &mut inner.grad {
            None => inner.grad = Some(delta),
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor5<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor5<S>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.parents() {
                if !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }
        order
    }
}
