//! Scalar abstraction for the numeric core.
//!
//! Everything numerical is generic over [`Scalar`] so the whole stack can run
//! in f32 (the default for training and inference) or f64 (used by the
//! gradient-check and oracle-equivalence suites, which need the extra
//! headroom for finite differences).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of tensors, log-probabilities and losses.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Checkpoint dtype tag (0 = f32, 1 = f64).
    const DTYPE: u8;

    /// Bytes per element in the checkpoint encoding.
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const BYTE_WIDTH: usize = 4;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("short f32"))
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const BYTE_WIDTH: usize = 8;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("short f64"))
    }
}

/// Large-negative additive mask value. Finite so f32 softmax stays NaN-free;
/// exp of it underflows to exactly zero in both widths.
pub fn neg_mask<S: Scalar>() -> S {
    S::from_f64(-1e9)
}

/// Log-space underflow sentinel, effectively "-inf" for the CTC dynamic
/// program. Kept finite so arithmetic on dead states never produces NaN.
pub fn log_zero<S: Scalar>() -> S {
    S::from_f64(-1e30)
}
