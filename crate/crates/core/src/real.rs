use core::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar precision used by tensors and the tape.
///
/// Implemented for `f64` (verification runs) and `f32` (training runs).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    const BYTES: usize;

    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// `exp` from `libm` whatever features `num-traits` was built with, so
    /// results do not depend on how the crate graph was unified.
    fn portable_exp(self) -> Self;

    fn portable_ln(self) -> Self;
}

impl Real for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn portable_exp(self) -> Self {
        libm::expf(self)
    }

    #[inline]
    fn portable_ln(self) -> Self {
        libm::logf(self)
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn portable_exp(self) -> Self {
        libm::exp(self)
    }

    #[inline]
    fn portable_ln(self) -> Self {
        libm::log(self)
    }
}

#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).portable_exp())
    } else {
        let e = x.portable_exp();
        e / (R::one() + e)
    }
}
