//! Scalar abstraction shared by every numeric routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type the filter can run on: `f32` or `f64`.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Converts an `f64` literal or parameter into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 value representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Wraps an angle into the canonical interval (-pi, pi].
pub fn wrap_angle<T: Scalar>(angle: T) -> T {
    let pi = T::pi();
    let two_pi = T::two_pi();
    // (pi - a) mod 2pi lies in [0, 2pi), so the result lies in (-pi, pi].
    let mut r = (pi - angle) % two_pi;
    if r < T::zero() {
        r += two_pi;
    }
    let wrapped = pi - r;
    if wrapped <= -pi {
        wrapped + two_pi
    } else {
        wrapped
    }
}

/// Negative infinity in the scalar type.
#[inline]
pub fn neg_infinity<T: Scalar>() -> T {
    T::lit(f64::NEG_INFINITY)
}

/// Numerically stable `ln(sum(exp(x)))`; -inf for an empty or all -inf input.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let max = values
        .iter()
        .copied()
        .fold(neg_infinity::<T>(), |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return max;
    }
    let sum = values.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}
