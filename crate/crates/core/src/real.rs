//! Float abstraction so the same forward/backward code runs in f32 for
//! training and f64 for finite-difference verification.

use num_traits::Float;

pub trait Real:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for lowering an f64 literal into the working precision.
#[inline]
pub fn rf<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal convertible to working float")
}
