//! Dense four-dimensional tensors in `(N, C, H, W)` layout.
//!
//! A [`Tensor`] is a cheaply clonable handle to shared storage. The element
//! data lives behind a lock so handles may cross threads; gradient state is
//! stored alongside and is populated by [`crate::tape::Tape::backward`].

use std::sync::{Arc, RwLock, RwLockReadGuard};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tensor extent, always `(batch, channels, height, width)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// The shape of a scalar: `(1, 1, 1, 1)`.
    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Row-major flat offset of element `(n, c, h, w)`.
    #[inline]
    pub const fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

struct Inner<T> {
    shape: Shape,
    requires_grad: bool,
    data: RwLock<Vec<T>>,
    grad: RwLock<Option<Vec<T>>>,
}

/// Shared handle to a dense `(N, C, H, W)` value with optional gradient
/// tracking. Cloning is O(1) and aliases the same storage.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{} requires_grad={}",
            self.shape(),
            self.requires_grad()
        )
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Shape, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                requires_grad,
                data: RwLock::new(data),
                grad: RwLock::new(None),
            }),
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::shape_mismatch(
                "from_vec",
                shape,
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self::from_parts(shape, data, false))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::from_parts(shape, vec![T::zero(); shape.numel()], false)
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Self::from_parts(shape, vec![v; shape.numel()], false)
    }

    /// A `(1,1,1,1)` scalar tensor.
    pub fn scalar(v: T) -> Self {
        Self::full(Shape::scalar(), v)
    }

    /// Fills from `U(lo, hi)`. Values are drawn in `f64` and narrowed, so a
    /// given seed yields the same parameters in both precision modes.
    pub fn uniform<R: Rng>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::lit(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Self::from_parts(shape, data, false)
    }

    /// Marks this tensor as a trainable leaf. Gradients accumulate into it
    /// during backward.
    pub fn into_param(self) -> Self {
        let shape = self.shape();
        let data = match Arc::try_unwrap(self.inner) {
            Ok(inner) => inner.data.into_inner().unwrap(),
            Err(arc) => arc.data.read().unwrap().clone(),
        };
        Self::from_parts(shape, data, true)
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Read access to the element data.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.inner.data.read().unwrap()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert!(
            self.shape().is_scalar(),
            "item() on non-scalar tensor of shape {}",
            self.shape()
        );
        self.data()[0]
    }

    /// Overwrites the element data in place; shapes must agree.
    pub fn load_data(&self, src: &[T]) -> Result<()> {
        if src.len() != self.numel() {
            return Err(Error::shape_mismatch(
                "load_data",
                self.shape(),
                format!("{} elements", src.len()),
            ));
        }
        self.inner.data.write().unwrap().copy_from_slice(src);
        Ok(())
    }

    pub(crate) fn apply_in_place(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.inner.data.write().unwrap());
    }

    /// Snapshot of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.read().unwrap().clone()
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.write().unwrap().take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().unwrap() = None;
    }

    pub(crate) fn accum_grad(&self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut guard = self.inner.grad.write().unwrap();
        match guard.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    /// Copy of a leaf without gradient tracking.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.shape(), self.to_vec(), false)
    }

    /// Converts element precision; a fresh leaf with the same flags.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::from_parts(self.shape(), data, self.requires_grad())
    }
}

pub(crate) fn new_tensor<T: Scalar>(shape: Shape, data: Vec<T>, requires_grad: bool) -> Tensor<T> {
    Tensor::from_parts(shape, data, requires_grad)
}
