//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the models are generic over. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + Debug
    + Display
    + Default
    + FromStr
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        // f64 -> f32 narrowing never fails for finite or infinite inputs
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `ln(cosh(x))` without overflow for large `|x|`.
    #[inline]
    fn ln_cosh(self) -> Self {
        let a = self.abs();
        let two = Self::lit(2.0);
        a + (-two * a).exp().ln_1p() - Self::LN_2()
    }

    /// `ln(1 + exp(x))` without overflow.
    #[inline]
    fn softplus(self) -> Self {
        if self > Self::zero() {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }

    /// Logistic sigmoid, stable for both signs.
    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len()))
}

/// Population variance (divides by `n`); `None` for an empty slice.
pub fn population_variance<T: Scalar>(xs: &[T]) -> Option<T> {
    let mu = mean(xs)?;
    Some(xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / T::from_usize_lossy(xs.len()))
}

/// Sample variance (divides by `n - 1`); `None` when fewer than two values.
pub fn sample_variance<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.len() < 2 {
        return None;
    }
    let mu = mean(xs)?;
    Some(xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / T::from_usize_lossy(xs.len() - 1))
}
