use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the math core is generic over: f32 or f64.
/// The crate-root aliases pin the default 64-bit instantiation.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + 'static
{
    /// Lift an f64 literal into this scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("scalar literal out of range")
    }

    /// Widen to f64 (exact for f32/f64).
    fn to_f64_value(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
