use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use realfft::num_traits::Float;
use realfft::FftNum;

/// Floating-point element type used by the transforms and the tensor engine.
///
/// Everything runs in `f32` by default; `f64` is used for finite-difference
/// checks and reference computations in tests.
pub trait Real:
    Float + FftNum + Default + Sum + AddAssign + SubAssign + MulAssign + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
