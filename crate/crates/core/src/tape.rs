//! Reverse-mode gradient tape.
//!
//! Every differentiable operation appends one node holding its backward rule
//! as a closure over the involved tensor handles. [`Tape::backward`] replays
//! the nodes once, in reverse recording order, accumulating gradients into
//! every reachable tensor that requires them. A tape serves exactly one
//! forward/backward pass and is single-threaded by contract; tensors
//! themselves may move freely between threads.

use std::cell::{Cell, RefCell};
use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct Node {
    #[allow(dead_code)]
    name: &'static str,
    run: Box<dyn FnOnce()>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node>>,
    enabled: bool,
    spent: Cell<bool>,
    _scalar: PhantomData<T>,
}

impl<T: Scalar> Tape<T> {
    /// A recording tape for one training or verification step.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            enabled: true,
            spent: Cell::new(false),
            _scalar: PhantomData,
        }
    }

    /// A non-recording tape: ops run forward-only, outputs never require
    /// gradients. Use for inference and evaluation.
    pub fn disabled() -> Self {
        Tape {
            enabled: false,
            ..Self::new()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Number of operations recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn record(&self, name: &'static str, run: impl FnOnce() + 'static) {
        debug_assert!(self.enabled, "recording on a disabled tape");
        self.nodes.borrow_mut().push(Node {
            name,
            run: Box::new(run),
        });
    }

    /// Seeds `d(loss)/d(loss) = 1` and replays every recorded operation once
    /// in reverse order. Consumes the recording: a second call is an error.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if !self.enabled {
            return Err(Error::TapeDisabled);
        }
        if self.spent.get() {
            return Err(Error::TapeConsumed);
        }
        if !loss.shape().is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss.shape(),
            });
        }
        self.spent.set(true);
        loss.accum_grad(&[T::one()]);
        let nodes = self.nodes.take();
        for node in nodes.into_iter().rev() {
            (node.run)();
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
