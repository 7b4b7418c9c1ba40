use std::fmt::{Debug, Display};

use num_traits::Float;

/// Storage scalar for attention arrays. Arithmetic on hot paths widens to
/// `f64` and narrows on store, so `f32` storage gets wide accumulation.
pub trait Real: Float + Debug + Display + Default + Send + Sync + 'static {
    /// Narrows from `f64`.
    fn narrow(x: f64) -> Self;
    fn widen(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn narrow(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn narrow(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
}

/// `x^p` by repeated multiplication. `p = 0` yields 1.
#[inline(always)]
pub fn int_pow(x: f64, p: u32) -> f64 {
    let mut acc = 1.0;
    for _ in 0..p {
        acc *= x;
    }
    acc
}

#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
