//! Scalar abstraction for the tensor kernels.
//!
//! All numeric kernels are written against [`Scalar`] so the same code runs
//! in `f32` or `f64`. The rest of the toolkit uses the `f64` aliases exported
//! from the crate root; gradient checking at the required tolerances needs
//! double precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Copy + Send + Sync + Debug + Display + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
