//! Scalar abstraction shared by the series and kernel code.
//!
//! The kernel recurrence only needs field operations and integer embedding,
//! so it runs unchanged over `f32`, `f64` and exact rationals.

use std::fmt::Debug;

use num_traits::{FromPrimitive, Num, NumAssign, Signed, ToPrimitive};

pub trait Scalar:
    Clone
    + Debug
    + PartialOrd
    + Num
    + NumAssign
    + Signed
    + FromPrimitive
    + ToPrimitive
    + Send
    + Sync
    + 'static
{
    fn from_index(i: usize) -> Self {
        Self::from_usize(i).expect("index representable in scalar type")
    }

    fn from_int(i: i64) -> Self {
        Self::from_i64(i).expect("integer representable in scalar type")
    }

    /// Exact `num / den` for rationals, correctly rounded for floats.
    fn ratio(num: i64, den: i64) -> Self {
        Self::from_int(num) / Self::from_int(den)
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Clone
        + Debug
        + PartialOrd
        + Num
        + NumAssign
        + Signed
        + FromPrimitive
        + ToPrimitive
        + Send
        + Sync
        + 'static
{
}

/// `x^k` by repeated multiplication.
pub(crate) fn powu<T: Scalar>(x: &T, k: usize) -> T {
    num_traits::pow(x.clone(), k)
}
