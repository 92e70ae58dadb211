//! Scalar abstraction over the two precision modes: `f32` for training and
//! inference, `f64` for gradient verification. Precision is fixed when a
//! graph's tensors are constructed, never per operation.

use num_traits::{Float, NumAssignOps, NumCast};

/// Element type of every tensor in the crate.
pub trait Scalar:
    Float + NumAssignOps + NumCast + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    /// Converts an `f64` literal; panics only on non-finite input.
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }

    fn as_f32(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).expect("scalar converts to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
