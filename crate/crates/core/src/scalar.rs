use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

/// Floating point type usable by the model code (`f32` or `f64`).
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` literal into the working scalar.
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("representable literal")
}

#[inline]
pub fn to_f64<S: Scalar>(x: S) -> f64 {
    x.to_f64().expect("finite scalar")
}

#[inline]
pub fn abs<S: Scalar>(x: S) -> S {
    if x < S::zero() {
        -x
    } else {
        x
    }
}
