//! Floating point element type used throughout the crate.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

/// Storage type of a [`Tensor`](crate::Tensor): `f32` or `f64`.
///
/// Kernels widen their operands to `f64` and round once when storing the
/// result, so `f32` tensors still accumulate in 64-bit.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn of(v: f64) -> f32 {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn of(v: f64) -> f64 {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Widen a slice to `f64`.
pub fn widen<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.as_f64()).collect()
}

/// Round a `f64` buffer to the storage type.
pub fn narrow<T: Scalar>(xs: Vec<f64>) -> Vec<T> {
    xs.into_iter().map(T::of).collect()
}

/// Index of the largest value, ties broken towards the lowest index.
///
/// NaN entries never win. Returns 0 for an empty slice.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
