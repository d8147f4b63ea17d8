//! Signed two's-complement fixed-point format used for features, scaling
//! factors, and normalization parameters at inference time.
//!
//! Rounding is to nearest with ties to even; out-of-range values saturate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub total_bits: u32,
    pub fraction_bits: u32,
}

impl Default for FixedPointFormat {
    fn default() -> Self {
        FixedPointFormat {
            total_bits: 24,
            fraction_bits: 16,
        }
    }
}

impl FixedPointFormat {
    /// Widest supported word. Simulator products of three values must fit
    /// in 128 bits.
    pub const MAX_TOTAL_BITS: u32 = 32;

    pub fn new(total_bits: u32, fraction_bits: u32) -> Result<Self> {
        let f = FixedPointFormat {
            total_bits,
            fraction_bits,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fraction_bits == 0
            || self.fraction_bits >= self.total_bits
            || self.total_bits > Self::MAX_TOTAL_BITS
        {
            return Err(Error::input(format!(
                "invalid fixed-point format: {} total bits, {} fraction bits",
                self.total_bits, self.fraction_bits
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        (self.fraction_bits as f64).exp2()
    }

    #[inline]
    pub fn min_raw(&self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    #[inline]
    pub fn max_raw(&self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    pub fn max_value(&self) -> f64 {
        self.from_raw(self.max_raw())
    }

    pub fn min_value(&self) -> f64 {
        self.from_raw(self.min_raw())
    }

    /// Nearest raw code, ties to even, saturated. NaN maps to zero.
    pub fn to_raw(&self, v: f64) -> i64 {
        if v.is_nan() {
            return 0;
        }
        let scaled = (v * self.scale()).round_ties_even();
        scaled.clamp(self.min_raw() as f64, self.max_raw() as f64) as i64
    }

    #[inline]
    pub fn from_raw(&self, raw: i64) -> f64 {
        raw as f64 / self.scale()
    }

    /// Rounds `v` onto the format grid.
    pub fn quantize(&self, v: f64) -> f64 {
        self.from_raw(self.to_raw(v))
    }

    pub fn is_representable(&self, v: f64) -> bool {
        v.is_finite() && self.quantize(v) == v
    }

    #[inline]
    pub fn saturate(&self, raw: i128) -> i64 {
        raw.clamp(self.min_raw() as i128, self.max_raw() as i128) as i64
    }
}

/// `x / 2^shift`, rounded to nearest with ties to even.
pub fn shift_round_even(x: i128, shift: u32) -> i128 {
    if shift == 0 {
        return x;
    }
    let floor = x >> shift;
    let rem = x - (floor << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}
