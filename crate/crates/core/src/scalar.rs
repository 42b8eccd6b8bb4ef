//! Scalar abstraction: every numeric routine in this crate is generic over
//! [`Scalar`], so the same code runs in `f32` (fast training) and `f64`
//! (gradient checks, exact oracles). Concrete aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable everywhere in the crate.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from f64 literals and configs.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 -> scalar conversion")
    }

    /// Conversion to f64 for serialization and reporting.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }

    fn half() -> Self {
        Self::from_f64_c(0.5)
    }

    fn two() -> Self {
        Self::from_f64_c(2.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
