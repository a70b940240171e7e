use std::fmt::{Debug, Display};

use num_traits::Float;

/// Element type of a [`Tensor`](crate::Tensor).
///
/// The injection kernels are written once against this trait; the on-disk
/// container stores `f32`.
pub trait Scalar: Float + Debug + Display + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
