//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real floating point scalar: `f32` or `f64`.
///
/// The associated tolerances let generic code pick thresholds that make
/// sense for the precision at hand.
pub trait Scalar:
    Float
    + std::fmt::LowerExp
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Maximum deviation of `BᵀB` from identity accepted as orthonormal.
    const ORTHO_TOL: f64;
    /// Tolerance on the unit norm of an encoded feature.
    const UNIT_TOL: f64;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const ORTHO_TOL: f64 = 1e-4;
    const UNIT_TOL: f64 = 1e-5;
}

impl Scalar for f64 {
    const ORTHO_TOL: f64 = 1e-10;
    const UNIT_TOL: f64 = 1e-12;
}
