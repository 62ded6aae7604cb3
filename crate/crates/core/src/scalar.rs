//! Scalar abstraction: every numeric kernel in this crate is generic over a
//! floating-point type. The CLI and the default type aliases instantiate f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point scalar: f32 or f64.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Convert an f64 literal. Panics only if the target type cannot
    /// represent any finite value, which cannot happen for f32/f64.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    /// Lossy conversion to f64 (exact for f32 and f64).
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Real>() {
        let x = S::lit(0.25);
        assert_eq!(x.to_f64_lossy(), 0.25);
    }

    #[test]
    fn literals_roundtrip() {
        roundtrip::<f32>();
        roundtrip::<f64>();
    }
}
