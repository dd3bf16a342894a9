//! Scalar abstraction shared by every numerical module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar the toolkit is generic over. Implemented for `f32` and `f64`.
///
/// Numerical tolerances quoted in the docs assume `f64`; `f32` works but only to
/// single precision.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Default + 'static {
    /// Converts an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        nalgebra::convert(v)
    }

    /// Lossy conversion to `f64` for reporting and serialization.
    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Real for f32 {}
impl Real for f64 {}
