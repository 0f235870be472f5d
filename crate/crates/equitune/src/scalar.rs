//! Floating-point scalar abstraction.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! model, transform, and test code runs at 32-bit and 64-bit precision.
//! Besides the arithmetic supplied by [`num_traits::Float`], the trait adds
//! the pieces the toolkit actually relies on:
//!
//! * a **total order** ([`Scalar::total_cmp`]) used to sort group-dimension
//!   contributions before summing them, which is what makes group averages
//!   bitwise permutation-invariant;
//! * explicit little-endian byte codecs for the checkpoint container;
//! * lossless conversion through `f64` for reporting and for shared
//!   initialization logic.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// A real scalar type usable throughout the toolkit (`f32` or `f64`).
pub trait Scalar: Float + Debug + Display + Default + Sum + Send + Sync + 'static {
    /// Human-readable precision name, e.g. `"f32"`.
    const NAME: &'static str;
    /// Width in bytes, used as the checkpoint precision tag.
    const BYTES: usize;

    /// Convert from `f64`, rounding to the nearest representable value.
    fn from_f64(v: f64) -> Self;
    /// Widen to `f64` exactly (`f32` → `f64` is lossless).
    fn to_f64(self) -> f64;
    /// IEEE-754 `totalOrder` comparison; never panics on NaN.
    fn total_cmp(&self, other: &Self) -> Ordering;
    /// Little-endian encoding, `Self::BYTES` long.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode from exactly `Self::BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn total_cmp(&self, other: &Self) -> Ordering {
        f32::total_cmp(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes for f32"))
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn total_cmp(&self, other: &Self) -> Ordering {
        f64::total_cmp(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes for f64"))
    }
}

/// Sum `values` in ascending total order.
///
/// The result depends only on the *multiset* of inputs, not their order, so
/// two computations that produce the same values at permuted positions sum to
/// bitwise-identical totals. Group-dimension reductions use this to turn
/// mathematical equivariance into exact float equality.
pub fn sorted_sum<S: Scalar>(values: &mut [S]) -> S {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let mut acc = S::zero();
    for v in values.iter() {
        acc = acc + *v;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_sum_is_permutation_invariant() {
        let mut a = [0.1f64, 1e16, -0.3, 7.7, 1e-9];
        let mut b = [7.7f64, -0.3, 1e-9, 0.1, 1e16];
        assert_eq!(
            sorted_sum(&mut a).to_bits(),
            sorted_sum(&mut b).to_bits(),
            "same multiset must sum to identical bits"
        );
    }

    #[test]
    fn byte_roundtrip() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        assert_eq!(buf.len(), f32::BYTES);
        assert_eq!(f32::read_le(&buf), 1.5f32);

        let mut buf = Vec::new();
        (-0.25f64).write_le(&mut buf);
        assert_eq!(buf.len(), f64::BYTES);
        assert_eq!(f64::read_le(&buf), -0.25f64);
    }

    #[test]
    fn f64_conversion_is_exact_for_f32() {
        let x = 0.1f32;
        assert_eq!(f32::from_f64(x.to_f64()), x);
    }
}
