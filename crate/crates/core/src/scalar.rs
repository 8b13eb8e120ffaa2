//! Element-type abstraction for the tensor engine.
//!
//! Training always runs in `f32`. The finite-difference gradient harness
//! instantiates the same code at `f64`, where central differences are clean
//! enough for a 1e-3 relative tolerance.

use std::fmt::{Debug, Display};

/// Float element of a [`crate::tensor::Tensor`].
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Gauss error function, used by the exact-CDF GELU.
    fn erf(self) -> Self;

    fn cast_from(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn cast_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
