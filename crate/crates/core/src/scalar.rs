//! Floating point abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A real scalar: `f32` or `f64`.
///
/// Everything in the crate is written against this trait; the crate root
/// re-exports `f64` aliases for the common types.
pub trait Scalar:
    'static
    + Copy
    + Debug
    + Default
    + Display
    + Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Send
    + Sync
    + Sum
    + for<'a> Sum<&'a Self>
{
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self;

    /// Converts a count.
    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }

    /// Widens to `f64`.
    fn as_f64(self) -> f64;

    /// One standard normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw on the half-open interval `(0, 1]`.
    fn uniform_open0<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                <StandardNormal as Distribution<$t>>::sample(&StandardNormal, rng)
            }

            #[inline]
            fn uniform_open0<R: Rng + ?Sized>(rng: &mut R) -> Self {
                1.0 - rng.random::<$t>()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Relative threshold below which a quantity is treated as numerically zero.
pub(crate) fn tiny<S: Scalar>() -> S {
    S::epsilon().sqrt() * S::of(1e-2)
}
