//! Floating point element type shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Real scalar the pipeline is generic over: `f32` for training speed,
/// `f64` for gradient checks and oracles.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Short name recorded in checkpoint metadata.
    const NAME: &'static str;

    #[inline]
    fn lit(v: f64) -> Self {
        // Infallible for f32/f64.
        Self::from_f64(v).unwrap()
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}
