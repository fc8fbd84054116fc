//! IEEE binary16 storage values.
//!
//! Codebook entries, V2a group scales/mid-points and outlier residuals are all
//! stored as binary16. Conversion from binary32 rounds to nearest, ties to even.

use half::f16;

use crate::error::{Error, Result};

/// A binary16 bit pattern that is never NaN.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Half(u16);

impl Half {
    pub const ZERO: Half = Half(0);
    pub const ONE: Half = Half(0x3c00);
    pub const MAX: Half = Half(0x7bff);

    /// Rounds to the nearest binary16 value. Fails on NaN or when the rounded
    /// value overflows to infinity.
    pub fn try_from_f32(x: f32) -> Result<Half> {
        let h = f16::from_f32(x);
        if !h.is_finite() {
            return Err(Error::HalfOverflow(x));
        }
        Ok(Half(h.to_bits()))
    }

    /// Like [`Half::try_from_f32`] but clamps out-of-range magnitudes to
    /// `±MAX`. NaN maps to zero.
    pub fn from_f32_saturating(x: f32) -> Half {
        if x.is_nan() {
            return Half::ZERO;
        }
        let h = f16::from_f32(x);
        if h.is_infinite() {
            if x > 0.0 {
                Half::MAX
            } else {
                Half(Half::MAX.0 | 0x8000)
            }
        } else {
            Half(h.to_bits())
        }
    }

    pub fn from_bits(bits: u16) -> Result<Half> {
        if f16::from_bits(bits).is_nan() {
            return Err(Error::HalfNan(bits));
        }
        Ok(Half(bits))
    }

    #[inline]
    pub fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f16::from_bits(self.0).to_f32()
    }

    pub fn is_finite(self) -> bool {
        f16::from_bits(self.0).is_finite()
    }

    /// Distance from this value to the next binary16 value of larger magnitude.
    pub fn ulp(self) -> f32 {
        let magnitude = self.0 & 0x7fff;
        if magnitude >= 0x7bff {
            // MAX and beyond: use the spacing just below MAX
            return 32.0;
        }
        f16::from_bits(magnitude + 1).to_f32() - f16::from_bits(magnitude).to_f32()
    }
}

impl std::fmt::Debug for Half {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Half({})", self.to_f32())
    }
}

impl std::fmt::Display for Half {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.to_f32().fmt(f)
    }
}

/// Round a binary32 value through binary16 and back.
pub fn round_to_half(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}
