//! Scalar abstraction for the numeric kernels.
//!
//! Everything below the trainer is generic over [`Real`] so the whole stack
//! can be instantiated at `f32` or `f64`. The crate-root aliases pin `f64`,
//! which is what the reproducibility and gradient-check guarantees are stated
//! for; `f32` is exercised by smoke tests only.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const LIT_EPS: Self;
}

impl Real for f32 {
    const LIT_EPS: Self = f32::EPSILON;
}

impl Real for f64 {
    const LIT_EPS: Self = f64::EPSILON;
}

/// Converts an `f64` literal into `T`. Panics only if the target type cannot
/// represent any nearby value, which cannot happen for the IEEE floats this
/// crate supports.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Lossy view of a generic scalar as `f64`, for logging and serialization.
#[inline]
pub fn as_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("scalar convertible to f64")
}
