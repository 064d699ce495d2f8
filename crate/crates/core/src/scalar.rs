//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`]; the crate root pins the
//! concrete `f64` aliases used by the pipeline.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable inside tensors, tapes and clustering math.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
}

/// Shorthand for lifting an `f64` constant into a generic scalar.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in scalar type")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lit_round_trips_for_both_widths() {
        assert_eq!(lit::<f64>(0.25), 0.25);
        assert_eq!(lit::<f32>(0.25), 0.25f32);
    }
}
