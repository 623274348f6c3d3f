//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// A real floating point scalar: `f32` for training runs, `f64` for
/// gradient verification.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Checkpoint dtype tag.
    const DTYPE: &'static str;
    /// Width of the little-endian encoding in bytes.
    const WIDTH: usize;
    /// Magnitude below which a gradient component is compared by absolute
    /// rather than relative finite-difference error. Central differences carry
    /// rounding noise of order `ulp(f) / eps`, so tiny components cannot be
    /// checked relatively.
    const FD_FLOOR: f64;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Converts an `f64` literal. Every `f64` is representable (possibly rounded) in
    /// both supported types, so this never fails.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;
    const FD_FLOOR: f64 = 1e-1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const WIDTH: usize = 8;
    const FD_FLOOR: f64 = 1e-3;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}
