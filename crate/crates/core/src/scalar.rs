//! Scalar abstraction for the numeric core.
//!
//! Tensor and graph code is generic over [`Real`] so the same kernels run at
//! f32 or f64. The lab itself instantiates everything at f64 (see the type
//! aliases at the crate root): gradient checks and byte-stable metrics need
//! the full 64-bit mantissa.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the tensor/autodiff core.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from f64 for constants baked into kernels.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}
