//! Dense tensor type with reverse-mode automatic differentiation.
//!
//! Values are contiguous row-major buffers; 4-D feature maps follow the
//! batch x channels x height x width convention. Every differentiable op
//! records its inputs and a backward rule on the implicit tape (the op
//! graph); node ids are monotonically increasing, so descending id order
//! is a valid reverse-topological order and one backward pass visits each
//! recorded op exactly once. Tensors produced by ops are never mutated;
//! only leaf parameters are updated in place (by the optimizer), between
//! tapes. Gradients accumulate additively across fan-out.

mod element;
pub mod kernels;
mod ops;
pub mod rng;

pub use element::Element;
pub use rng::RngState;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CHECK_FINITE: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables tape recording while alive (evaluation / finite differences).
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Enables per-op NaN/Inf detection while alive (debug mode; the training
/// loop turns it on to name the op that produced the first non-finite
/// value).
pub struct FiniteCheckGuard {
    prev: bool,
}

pub fn check_finite() -> FiniteCheckGuard {
    let prev = CHECK_FINITE.with(|c| c.replace(true));
    FiniteCheckGuard { prev }
}

impl Drop for FiniteCheckGuard {
    fn drop(&mut self) {
        CHECK_FINITE.with(|c| c.set(self.prev));
    }
}

type BackwardRule<T> = Box<dyn Fn(&[T])>;

struct OpNode<T: Element> {
    #[allow(dead_code)]
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardRule<T>,
}

struct TensorInner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<OpNode<T>>,
    backward_done: Cell<bool>,
}

/// N-dimensional array of floats with optional gradient tracking.
///
/// Cloning is cheap (reference-counted handle). The default element type is
/// f32; `Tensor<f64>` is the shadow path used by gradient verification.
pub struct Tensor<T: Element = f32> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor<{}>(shape={:?}, requires_grad={})",
            T::DTYPE_NAME,
            self.inner.shape,
            self.inner.requires_grad
        )
    }
}

impl<T: Element> Tensor<T> {
    // ------------------------------------------------------------------
    // Construction

    fn new_inner(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<OpNode<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
                backward_done: Cell::new(false),
            }),
        }
    }

    /// Leaf tensor from raw data. Errors if the element count does not
    /// match the shape.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, shape.iter().product::<usize>(), data.len()),
            ));
        }
        Ok(Self::new_inner(data, shape.to_vec(), false, None))
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&x| T::from_f64(x)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_inner(vec![T::zero(); n], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new_inner(vec![value; n], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::new_inner(vec![value], vec![], false, None)
    }

    /// Samples from N(0, std^2) truncated to +/- 2 std. Deterministic for a
    /// given RNG state.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut RngState) -> Result<Self> {
        if std <= 0.0 {
            return Err(Error::invalid("trunc_normal", "std must be positive"));
        }
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.next_trunc_normal(std)))
            .collect();
        Ok(Self::new_inner(data, shape.to_vec(), false, None))
    }

    /// Marks this leaf as a trainable parameter. Only leaves can be marked;
    /// op outputs get their flag from their inputs.
    pub fn requires_grad(self) -> Self {
        assert!(
            self.inner.op.is_none(),
            "requires_grad can only be set on leaf tensors"
        );
        Tensor {
            inner: Rc::new(TensorInner {
                id: self.inner.id,
                shape: self.inner.shape.clone(),
                data: RefCell::new(self.inner.data.borrow().clone()),
                requires_grad: true,
                grad: RefCell::new(None),
                op: None,
                backward_done: Cell::new(false),
            }),
        }
    }

    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        name: &'static str,
        parents: Vec<Tensor<T>>,
        backward: BackwardRule<T>,
    ) -> Result<Self> {
        if CHECK_FINITE.with(|c| c.get()) && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        let op = track.then(|| OpNode {
            name,
            parents,
            backward,
        });
        Ok(Self::new_inner(data, shape, track, op))
    }

    // ------------------------------------------------------------------
    // Access

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn element_count(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self) -> T {
        assert_eq!(self.element_count(), 1, "value() needs a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Element at a full index (row-major).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank());
        let mut off = 0;
        let mut stride = 1;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape()).enumerate().rev() {
            assert!(ix < dim, "index {:?} out of bounds at axis {}", index, i);
            off += ix * stride;
            stride *= dim;
        }
        self.inner.data.borrow()[off]
    }

    pub fn is_param(&self) -> bool {
        self.inner.requires_grad && self.inner.op.is_none()
    }

    pub fn tracks_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// In-place mutation of the underlying buffer. Reserved for leaf
    /// updates (optimizer steps, finite-difference probes); mutating an op
    /// output would invalidate recorded backward rules.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        f(&mut self.inner.data.borrow_mut())
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Ref<'_, [T]>> {
        Ref::filter_map(self.inner.grad.borrow(), |g| g.as_deref()).ok()
    }

    pub fn grad_to_vec(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detached copy: same values, fresh leaf, no history.
    pub fn detach(&self) -> Self {
        Self::new_inner(self.to_vec(), self.inner.shape.clone(), false, None)
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[T]) {
        debug_assert_eq!(contrib.len(), self.element_count());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b = *b + *c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    pub(crate) fn wants_grad(&self) -> bool {
        self.inner.requires_grad
    }

    // ------------------------------------------------------------------
    // Backward

    /// Reverse-mode pass from a scalar loss. Populates `grad` on every
    /// tensor reachable on the tape that tracks gradients; contributions
    /// across fan-out add. Errors on a non-scalar loss and on a second
    /// backward through the same tape root.
    pub fn backward(&self) -> Result<()> {
        if self.element_count() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.inner.shape
            )));
        }
        if !self.inner.requires_grad {
            return Err(Error::Backward(
                "loss does not track gradients (nothing recorded on the tape)".into(),
            ));
        }
        if self.inner.backward_done.get() {
            return Err(Error::Backward(
                "backward already ran for this tape; rebuild the graph before calling again"
                    .into(),
            ));
        }
        self.inner.backward_done.set(true);
        self.accumulate_grad(&[T::one()]);

        // Iterative DFS: recursion would overflow on deep graphs.
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<Tensor<T>> = vec![self.clone()];
        seen.insert(self.inner.id);
        while let Some(t) = stack.pop() {
            if let Some(op) = &t.inner.op {
                for p in &op.parents {
                    if p.inner.requires_grad && seen.insert(p.inner.id) {
                        stack.push(p.clone());
                    }
                }
                nodes.push(t);
            }
        }
        // Parents are always created before their outputs, so descending id
        // order visits every consumer before its producers.
        nodes.sort_unstable_by(|a, b| b.inner.id.cmp(&a.inner.id));

        for node in &nodes {
            let grad = node.inner.grad.borrow().clone();
            if let (Some(g), Some(op)) = (grad, &node.inner.op) {
                (op.backward)(&g);
            }
        }
        Ok(())
    }

    /// Asserts every stored value is finite (debug-mode invariant check).
    pub fn assert_finite(&self, op: &'static str) -> Result<()> {
        if self.inner.data.borrow().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::<f32>::scalar(3.5);
        assert_eq!(t.value(), 3.5);
        assert_eq!(t.rank(), 0);
    }

    #[test]
    fn from_vec_rejects_bad_shape() {
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
    }

    #[test]
    fn backward_needs_scalar() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        let y = x.scalar_mul(2.0).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn backward_twice_errors() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert!(loss.backward().is_err());
    }

    #[test]
    fn loss_sum_grad_is_ones() {
        let x = Tensor::<f32>::from_vec(vec![1.0, -2.0, 3.0], &[3]).unwrap().requires_grad();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_to_vec().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn loss_sum_of_squares_grad_is_2x() {
        let x = Tensor::<f32>::from_vec(vec![1.0, -2.0, 3.0], &[3]).unwrap().requires_grad();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_to_vec().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn fanout_accumulates_additively() {
        let x = Tensor::<f32>::from_vec(vec![2.0], &[1]).unwrap().requires_grad();
        // y = x + x => dy/dx = 2
        let y = x.add(&x).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad_to_vec().unwrap(), vec![2.0]);
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::<f32>::from_vec(vec![1.0], &[1]).unwrap().requires_grad();
        let guard = no_grad();
        let y = x.scalar_mul(3.0).unwrap();
        drop(guard);
        assert!(!y.tracks_grad());
    }

    #[test]
    fn finite_check_names_op() {
        let x = Tensor::<f32>::from_vec(vec![f32::MAX], &[1]).unwrap();
        let guard = check_finite();
        let err = x.mul(&x).unwrap_err();
        drop(guard);
        match err {
            Error::NonFinite { op } => assert_eq!(op, "mul"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn trunc_normal_is_deterministic_and_bounded() {
        let mut r1 = RngState::new(9);
        let mut r2 = RngState::new(9);
        let a = Tensor::<f32>::trunc_normal(&[64], 0.02, &mut r1).unwrap();
        let b = Tensor::<f32>::trunc_normal(&[64], 0.02, &mut r2).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert!(a.data().iter().all(|v| v.abs() <= 0.04 + 1e-9));
    }

    #[test]
    fn trunc_normal_sample_mean_near_zero() {
        let mut rng = RngState::new(11);
        let n = 100_000;
        let t = Tensor::<f64>::trunc_normal(&[n], 0.02, &mut rng).unwrap();
        let mean: f64 = t.data().iter().sum::<f64>() / n as f64;
        // 5 standard errors with a wide factor; truncation shrinks variance.
        let bound = 3.0 * 0.02 / (n as f64).sqrt() * 5.0;
        assert!(mean.abs() < bound, "mean {mean} outside {bound}");
    }
}
