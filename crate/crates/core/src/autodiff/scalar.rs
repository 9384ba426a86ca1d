//! The arithmetic interface shared by plain and taped evaluation.
//!
//! Geometry, pose, sampling and compositing code is written once against
//! [`Scalar`]. Instantiated with a bare [`Real`] it evaluates directly;
//! instantiated with [`TVar`](super::TVar) every operation is recorded on a
//! tape. Both instantiations perform the same floating-point operations in
//! the same order, so taped values equal untaped values bit for bit.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::kink;
use crate::real::{sigmoid, Real};

pub trait Scalar<R: Real>:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<R, Output = Self>
    + Sub<R, Output = Self>
    + Mul<R, Output = Self>
    + Div<R, Output = Self>
{
    fn value(self) -> R;
    /// A constant carried in the same representation as `self`.
    fn lift(self, c: R) -> Self;

    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn sigmoid(self) -> Self;
    fn relu(self) -> Self;
    /// Clamp to `[lo, hi]`; the derivative is 0 outside the active range.
    fn clamp(self, lo: R, hi: R) -> Self;
    /// Four-quadrant arctangent of `self / x`.
    fn atan2(self, x: Self) -> Self;

    /// `c - self`.
    #[inline(always)]
    fn rsub(self, c: R) -> Self {
        -self + c
    }
    #[inline(always)]
    fn square(self) -> Self {
        self * self
    }
}

/// Derivative of `sqrt` used by the taped path; zero at the origin.
#[inline(always)]
pub(crate) fn d_sqrt<R: Real>(out: R) -> R {
    if out > R::zero() {
        R::lit(0.5) / out
    } else {
        R::zero()
    }
}

/// Clamp shared by both paths (NaN-preserving `min`/`max` are avoided).
#[inline(always)]
pub(crate) fn clamp_value<R: Real>(x: R, lo: R, hi: R) -> R {
    kink::note(1, (x < lo) as u64 + 2 * (x > hi) as u64);
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

impl<R: Real> Scalar<R> for R {
    #[inline(always)]
    fn value(self) -> R {
        self
    }
    #[inline(always)]
    fn lift(self, c: R) -> Self {
        c
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        num_traits::Float::sqrt(self)
    }
    #[inline(always)]
    fn sin(self) -> Self {
        num_traits::Float::sin(self)
    }
    #[inline(always)]
    fn cos(self) -> Self {
        num_traits::Float::cos(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        num_traits::Float::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        num_traits::Float::ln(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        kink::note(3, (self < R::zero()) as u64);
        num_traits::Float::abs(self)
    }
    #[inline(always)]
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    #[inline(always)]
    fn relu(self) -> Self {
        kink::note(2, (self > R::zero()) as u64);
        if self > R::zero() {
            self
        } else {
            R::zero()
        }
    }
    #[inline(always)]
    fn clamp(self, lo: R, hi: R) -> Self {
        clamp_value(self, lo, hi)
    }
    #[inline(always)]
    fn atan2(self, x: Self) -> Self {
        num_traits::Float::atan2(self, x)
    }
}
