//! Scalar abstraction shared by every numeric kernel in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar the engine is generic over: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Logit used in place of negative infinity for masked attention cells.
    /// Large enough that `exp` underflows to exactly zero after max-subtraction.
    const MASKED_LOGIT: Self;

    /// Converts an `f64` literal. Every `f64` is representable (possibly rounded) in both impls.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    const MASKED_LOGIT: Self = -1.0e30;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const MASKED_LOGIT: Self = -1.0e300;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Clamps into the closed unit interval. NaN maps to zero.
#[inline]
pub fn clamp01<T: Real>(x: T) -> T {
    if x.is_nan() {
        T::zero()
    } else {
        x.max(T::zero()).min(T::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_logit_underflows() {
        assert_eq!((f32::MASKED_LOGIT - 3.0).exp(), 0.0);
        assert_eq!((f64::MASKED_LOGIT - 3.0).exp(), 0.0);
    }

    #[test]
    fn clamp01_handles_nan_and_bounds() {
        assert_eq!(clamp01(f64::NAN), 0.0);
        assert_eq!(clamp01(-0.5f32), 0.0);
        assert_eq!(clamp01(1.5f64), 1.0);
        assert_eq!(clamp01(0.25f64), 0.25);
    }
}
