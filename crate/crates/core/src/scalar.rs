//! Scalar abstraction so the probability machinery runs at f32 or f64.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar used for probabilities, confidences and values.
///
/// All core math is written against this trait; `f64` is the default used by
/// the CLI and the certification suite, `f32` exists for callers that want
/// the smaller footprint and can live with looser tolerances.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Absolute tolerance when checking that a distribution sums to one.
    fn sum_tolerance() -> Self;

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f64 {
    fn sum_tolerance() -> f64 {
        1e-9
    }
}

impl Scalar for f32 {
    fn sum_tolerance() -> f32 {
        1e-5
    }
}
