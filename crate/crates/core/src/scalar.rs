use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the math core is written against (f32 or f64).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `+1` for non-negative values (including zero), `-1` otherwise.
    #[inline]
    fn signum_nonneg(self) -> Self {
        if self >= Self::zero() {
            Self::one()
        } else {
            -Self::one()
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn all_finite<T: Scalar>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Neumaier-compensated sum.
pub fn compensated_sum<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    let (sum, comp) = compensated_parts(values);
    sum + comp
}

/// Neumaier summation returning the running sum and its unrounded correction term.
pub fn compensated_parts<T: Scalar>(values: impl IntoIterator<Item = T>) -> (T, T) {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for v in values {
        let (t, e) = two_sum(sum, v);
        comp += e;
        sum = t;
    }
    (sum, comp)
}

/// `a + b` as the rounded sum and its exact rounding error.
pub fn two_sum<T: Scalar>(a: T, b: T) -> (T, T) {
    let t = a + b;
    let e = if a.abs() >= b.abs() { (a - t) + b } else { (b - t) + a };
    (t, e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(v.iter().copied().sum::<f64>(), 1.0);
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn two_sum_error_is_exact() {
        let (s, e) = two_sum(1.0, 1e-17);
        assert_eq!((s, e), (1.0, 1e-17));
    }
}
