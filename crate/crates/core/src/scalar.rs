//! Floating-point abstraction shared by the numerical modules.
//!
//! Everything that does not talk to external statistics code is written
//! against [`Scalar`], so the networks, the forward simulator and the
//! reflection maps run in either `f32` or `f64`. The library defaults to
//! `f64` everywhere; gradient checks need the extra precision.

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    NdFloat + FromPrimitive + Default + Serialize + DeserializeOwned + Send + Sync + 'static
{
    /// Name written into persisted manifests.
    const DTYPE: &'static str;

    /// Lossy conversion from `f64`. Constants and sampled normals enter here.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halve<S: Scalar>(x: S) -> S {
        x / S::of(2.0)
    }

    #[test]
    fn both_widths_work() {
        assert_eq!(halve(3.0f64), 1.5);
        assert_eq!(halve(3.0f32), 1.5);
        assert_eq!(<f32 as Scalar>::DTYPE, "f32");
        assert_eq!(2.5f32.as_f64(), 2.5);
    }
}
