//! Scalar abstraction for the numeric core.
//!
//! Everything in the tensor engine and the model stack is generic over
//! [`Scalar`]; the crate root exports `f64` aliases, which is what the
//! shipped pipeline uses.

use std::fmt;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar usable by the tensor engine.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    /// Raw bit pattern, widened to u64. Used by the checkpoint format so
    /// round-trips are bit-exact.
    fn to_bits_u64(self) -> u64;
    fn from_bits_u64(bits: u64) -> Self;

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// Uniform draw from [0, 1).
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}
