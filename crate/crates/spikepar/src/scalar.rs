//! Scalar abstraction: every numeric kernel in the crate is generic over
//! this trait so the same code runs in `f32` (training) and `f64`
//! (oracles, finite-difference checks).

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};

pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 -> scalar")
    }
    fn of_f32(v: f32) -> Self {
        <Self as FromPrimitive>::from_f32(v).expect("f32 -> scalar")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar -> f64")
    }
    fn as_f32(self) -> f32 {
        self.to_f32().expect("scalar -> f32")
    }
    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize -> scalar")
    }
    fn half() -> Self {
        Self::of_f64(0.5)
    }
    fn sigmoid(self) -> Self {
        // split on sign for numerical stability
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
    /// log(sigmoid(x)), stable for large |x|.
    fn log_sigmoid(self) -> Self {
        if self >= Self::zero() {
            -((-self).exp().ln_1p())
        } else {
            self - self.exp().ln_1p()
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
