//! Generic scalar abstraction.
//!
//! Every numeric kernel in this crate is generic over [`Real`], a trait alias
//! over the `num-traits` float hierarchy. Acceptance-grade inference runs in
//! `f64` ([`crate::Real64`]); `f32` ([`crate::Real32`]) is available as a
//! memory/throughput trade-off and monomorphizes to the same code paths.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type for all Gaussian algebra and message passing.
///
/// The bound set is the intersection of what the kernels need: IEEE float
/// semantics (`Float`), in-place arithmetic (`NumAssign`), conversions for
/// seeded sampling and I/O (`FromPrimitive`/`ToPrimitive`), iterator sums,
/// and thread-safety so factor updates can run on a worker pool.
pub trait Real:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` for constants and config values.
    #[inline]
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant convertible to Real")
    }

    /// Widening conversion to `f64` for metrics, serialization and logging.
    #[inline]
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("Real convertible to f64")
    }
}

impl<T> Real for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Shorthand for `T::from_f64_c` at call sites dense with constants.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64_c(x)
}
