//! Packed sign vectors and the XnorPopcount primitive.
//!
//! A sign vector `s ∈ {-1, +1}^N` is stored one bit per element with the
//! encoding `-1 → 0`, `+1 → 1`. Element `i` lives at bit `i % 64` of word
//! `i / 64`. Bits past `N - 1` in the last word are always zero.

use std::fmt;

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

/// A single ±1 value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Neg,
    Pos,
}

impl Sign {
    /// Sign of a real value, with zero mapping to `Pos`.
    #[inline]
    pub fn of(x: f64) -> Sign {
        if x >= 0.0 {
            Sign::Pos
        } else {
            Sign::Neg
        }
    }

    #[inline]
    pub fn value(self) -> i64 {
        match self {
            Sign::Neg => -1,
            Sign::Pos => 1,
        }
    }

    #[inline]
    pub fn as_f64(self) -> f64 {
        self.value() as f64
    }

    #[inline]
    pub fn bit(self) -> bool {
        self == Sign::Pos
    }

    #[inline]
    pub fn from_bit(bit: bool) -> Sign {
        if bit {
            Sign::Pos
        } else {
            Sign::Neg
        }
    }
}

#[inline]
pub fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a `len`-element vector.
#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Bit-packed sign vector. Immutable once built.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitVector {
    len: usize,
    words: Vec<u64>,
}

impl BitVector {
    /// Packs a slice of signs.
    pub fn pack(signs: &[Sign]) -> Self {
        Self::from_fn(signs.len(), |i| signs[i].bit())
    }

    /// Builds a vector whose bit `i` is `f(i)`.
    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut words = vec![0u64; words_for(len)];
        for i in 0..len {
            if f(i) {
                words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
            }
        }
        BitVector { len, words }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        Self::from_fn(bits.len(), |i| bits[i])
    }

    /// Sign bits of a real vector (`x >= 0 → 1`).
    pub fn from_reals(xs: &[f64]) -> Self {
        Self::from_fn(xs.len(), |i| xs[i] >= 0.0)
    }

    /// Reassembles a vector from raw words, rejecting non-canonical padding.
    pub fn from_words(len: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::shape(format!(
                "{} words cannot hold exactly {} bits",
                words.len(),
                len
            )));
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(len) != 0 {
                return Err(Error::Format(
                    "bit vector has non-zero padding bits".into(),
                ));
            }
        }
        Ok(BitVector { len, words })
    }

    pub fn ones(len: usize) -> Self {
        Self::from_fn(len, |_| true)
    }

    pub fn zeros(len: usize) -> Self {
        BitVector {
            len,
            words: vec![0; words_for(len)],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn sign(&self, i: usize) -> Sign {
        Sign::from_bit(self.get(i))
    }

    pub fn signs(&self) -> Vec<Sign> {
        (0..self.len).map(|i| self.sign(i)).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Bitwise complement within the valid length.
    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(self.len);
        }
        BitVector {
            len: self.len,
            words,
        }
    }

    /// Number of positions where `self` and `other` agree.
    pub fn xnor_popcount(&self, other: &BitVector) -> Result<usize> {
        if self.len != other.len {
            return Err(Error::shape(format!(
                "xnor_popcount of lengths {} and {}",
                self.len, other.len
            )));
        }
        Ok(xnor_popcount_words(&self.words, &other.words, self.len))
    }
}

/// XnorPopcount over raw word slices holding `len` valid bits.
#[inline]
pub(crate) fn xnor_popcount_words(a: &[u64], b: &[u64], len: usize) -> usize {
    let n = a.len();
    if n == 0 {
        return 0;
    }
    let mut p = 0usize;
    for k in 0..n - 1 {
        p += (!(a[k] ^ b[k])).count_ones() as usize;
    }
    p += (!(a[n - 1] ^ b[n - 1]) & tail_mask(len)).count_ones() as usize;
    p
}

/// Converts an agreement count `p` over `n` elements to the signed dot
/// product `2p - n`.
///
/// Panics if `p > n`.
#[inline]
pub fn popcount_to_dot(p: usize, n: usize) -> i64 {
    assert!(p <= n, "popcount {p} exceeds element count {n}");
    2 * p as i64 - n as i64
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector[{}](", self.len)?;
        for i in 0..self.len.min(128) {
            write!(f, "{}", if self.get(i) { '1' } else { '0' })?;
        }
        if self.len > 128 {
            write!(f, "…")?;
        }
        write!(f, ")")
    }
}
