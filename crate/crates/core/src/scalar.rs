//! Scalar abstraction: the numeric element type of every tensor.
//!
//! All math in this crate is written against [`Scalar`] so the same kernels
//! run in f32 or f64. The harness and all stated tolerances use f64 (see the
//! `Tensor64` / `Tape64` aliases at the crate root).

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors and tapes.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Display + Debug + Default + Send + Sync + 'static
{
    /// Shorthand for lossless-enough literal conversion from f64.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal must convert into scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lit_round_trips_through_both_widths() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.25), 0.25f32);
        assert_eq!(1.5f32.to_f64_lossy(), 1.5);
    }
}
