//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; panics only for values the type cannot hold at all.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic function that never returns exactly 0 or 1.
///
/// For very negative arguments the `exp(x) / (1 + exp(x))` branch is used so
/// precision is kept deep into the tail; the result is then clamped into the
/// open unit interval.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    let p = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    clamp_open_unit(p)
}

/// Clamp into `[min_positive, 1 - epsilon]`.
#[inline]
pub fn clamp_open_unit<T: Scalar>(p: T) -> T {
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon();
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `out += scale * v`
#[inline]
pub fn axpy<T: Scalar>(scale: T, v: &[T], out: &mut [T]) {
    debug_assert_eq!(v.len(), out.len());
    for (o, x) in out.iter_mut().zip(v) {
        *o += scale * *x;
    }
}
