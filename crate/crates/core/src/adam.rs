//! Adam optimizer with bias-corrected first and second moments.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter moment state plus the shared step counter. One `Adam` value
/// drives one ordered parameter list; the ordering must stay stable across
/// steps (and across save/restore) because moments are matched by position.
pub struct Adam<T: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_hyperparams(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Completed update count (the `t` in the bias correction).
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter, consuming accumulated
    /// gradients. A parameter whose gradient is absent contributes a zero
    /// gradient; its moments still decay.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        } else if self.m.len() != params.len() {
            return Err(Error::InvalidArg(format!(
                "optimizer state holds {} parameters, step got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let c1 = one - T::lit(self.beta1.powi(self.t as i32));
        let c2 = one - T::lit(self.beta2.powi(self.t as i32));
        for (i, p) in params.iter().enumerate() {
            let grad = p.take_grad();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            if m.len() != p.numel() {
                return Err(Error::InvalidArg(format!(
                    "optimizer state size {} does not match parameter size {}",
                    m.len(),
                    p.numel()
                )));
            }
            p.apply_in_place(|data| {
                for j in 0..data.len() {
                    let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                    m[j] = b1 * m[j] + (one - b1) * g;
                    v[j] = b2 * v[j] + (one - b2) * g * g;
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    /// Moment buffers in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restores moment buffers and step counter from a checkpoint.
    pub fn restore(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: u64) -> Result<()> {
        if m.len() != v.len() {
            return Err(Error::InvalidArg(
                "optimizer restore: m and v parameter counts differ".into(),
            ));
        }
        for (a, b) in m.iter().zip(&v) {
            if a.len() != b.len() {
                return Err(Error::InvalidArg(
                    "optimizer restore: m and v buffer sizes differ".into(),
                ));
            }
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }
}
