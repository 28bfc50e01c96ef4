//! Floating-point element abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type of vectors, dense matrices, and CSR matrices.
///
/// Implemented for `f32` and `f64` only; the serialization formats record
/// the width so files round-trip at the precision they were written with.
pub trait Scalar:
    Float + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Width of one element in bytes as stored on disk.
    const WIDTH: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Reads one element from `Self::WIDTH` little-endian bytes.
    fn from_le_slice(bytes: &[u8]) -> Self;

    /// Appends the little-endian encoding of `self` to `out`.
    fn extend_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32 slice"))
    }

    fn extend_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64 slice"))
    }

    fn extend_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}
