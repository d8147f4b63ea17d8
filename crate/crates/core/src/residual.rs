//! M-level residual binarization.
//!
//! A real value `x` is approximated greedily by `e = Σ γ_i · s_i`, where
//! `s_1 = Sign(x)` and each later sign binarizes the residual left over by
//! the previous levels:
//!
//! ```text
//! r_1 = x
//! s_i = Sign(r_i)            (Sign(0) = +1)
//! r_{i+1} = r_i - s_i * γ_i
//! ```
//!
//! One set of scaling factors is shared by every feature of a layer, so a
//! feature is fully described by its `M` sign bits. A feature vector becomes
//! `M` bit planes ([`ResidualEncoding`]), and its dot product with a binary
//! weight row decomposes into `M` XnorPopcount operations.

use serde::{Deserialize, Serialize};

use crate::bitcore::{popcount_to_dot, BitVector, Sign};
use crate::error::{Error, Result};

/// Largest supported number of residual levels.
pub const MAX_LEVELS: usize = 16;

/// Per-layer activation scaling factors `γ_1 … γ_M`, in level order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFactors {
    gammas: Vec<f64>,
}

impl ScalingFactors {
    pub fn new(gammas: Vec<f64>) -> Result<Self> {
        if gammas.is_empty() || gammas.len() > MAX_LEVELS {
            return Err(Error::input(format!(
                "need 1..={MAX_LEVELS} scaling factors, got {}",
                gammas.len()
            )));
        }
        if let Some(g) = gammas.iter().find(|g| !g.is_finite() || **g == 0.0) {
            return Err(Error::input(format!(
                "scaling factors must be finite and nonzero, got {g}"
            )));
        }
        Ok(ScalingFactors { gammas })
    }

    /// `γ_1 = first`, each later level half the previous one.
    pub fn geometric(first: f64, levels: usize) -> Result<Self> {
        Self::new((0..levels).map(|i| first / f64::powi(2.0, i as i32)).collect())
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.gammas.len()
    }

    #[inline]
    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// True iff every `γ_i > 0` and `γ_i > Σ_{j>i} γ_j`.
    pub fn is_superincreasing(&self) -> bool {
        is_superincreasing(&self.gammas)
    }
}

pub fn is_superincreasing(gammas: &[f64]) -> bool {
    if gammas.iter().any(|&g| g <= 0.0) {
        return false;
    }
    let mut tail = 0.0;
    for &g in gammas.iter().rev() {
        if g <= tail {
            return false;
        }
        tail += g;
    }
    true
}

/// Packed `M`-bit code of one feature. Level 1 is the most significant bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Code {
    bits: u32,
    levels: u8,
}

impl Code {
    pub fn new(bits: u32, levels: usize) -> Result<Self> {
        if levels == 0 || levels > MAX_LEVELS {
            return Err(Error::input(format!("unsupported level count {levels}")));
        }
        if bits >> levels != 0 {
            return Err(Error::input(format!(
                "code {bits:#b} does not fit in {levels} bits"
            )));
        }
        Ok(Code {
            bits,
            levels: levels as u8,
        })
    }

    /// Builds a code from per-level bits, level 1 first.
    pub fn from_level_bits(level_bits: &[bool]) -> Result<Self> {
        let bits = level_bits
            .iter()
            .fold(0u32, |acc, &b| (acc << 1) | u32::from(b));
        Code::new(bits, level_bits.len())
    }

    #[inline]
    pub fn bits(self) -> u32 {
        self.bits
    }

    #[inline]
    pub fn levels(self) -> usize {
        self.levels as usize
    }

    /// Bit of level `i` (0-based, level 1 first).
    #[inline]
    pub fn level_bit(self, i: usize) -> bool {
        debug_assert!(i < self.levels());
        (self.bits >> (self.levels() - 1 - i)) & 1 == 1
    }

    /// Reconstructed value `Σ γ_i · s_i`.
    pub fn value(self, gammas: &[f64]) -> f64 {
        debug_assert_eq!(gammas.len(), self.levels());
        gammas
            .iter()
            .enumerate()
            .map(|(i, g)| g * Sign::from_bit(self.level_bit(i)).as_f64())
            .sum()
    }
}

/// Encodes one value; returns its code and the residuals `r_1 … r_M`.
pub fn encode_scalar(x: f64, gammas: &[f64]) -> (Code, Vec<f64>) {
    let mut r = x;
    let mut bits = 0u32;
    let mut residuals = Vec::with_capacity(gammas.len());
    for &g in gammas {
        residuals.push(r);
        let s = Sign::of(r);
        bits = (bits << 1) | u32::from(s.bit());
        r -= s.as_f64() * g;
    }
    (
        Code {
            bits,
            levels: gammas.len() as u8,
        },
        residuals,
    )
}

/// `M` bit planes over a feature vector; plane `i` holds `Sign(r_{i+1})`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualEncoding {
    levels: Vec<BitVector>,
}

impl ResidualEncoding {
    pub fn from_levels(levels: Vec<BitVector>) -> Result<Self> {
        let Some(first) = levels.first() else {
            return Err(Error::input("an encoding needs at least one level"));
        };
        if levels.len() > MAX_LEVELS {
            return Err(Error::input(format!("too many levels: {}", levels.len())));
        }
        let n = first.len();
        if levels.iter().any(|l| l.len() != n) {
            return Err(Error::shape("encoding levels differ in length"));
        }
        Ok(ResidualEncoding { levels })
    }

    /// Assembles bit planes from per-element codes.
    pub fn from_codes(codes: &[Code], levels: usize) -> Result<Self> {
        if codes.iter().any(|c| c.levels() != levels) {
            return Err(Error::shape(format!("codes must all have {levels} levels")));
        }
        let planes = (0..levels)
            .map(|l| BitVector::from_fn(codes.len(), |j| codes[j].level_bit(l)))
            .collect();
        Self::from_levels(planes)
    }

    #[inline]
    pub fn levels(&self) -> &[BitVector] {
        &self.levels
    }

    #[inline]
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Element count `N`.
    #[inline]
    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn code(&self, i: usize) -> Code {
        let bits = self
            .levels
            .iter()
            .fold(0u32, |acc, l| (acc << 1) | u32::from(l.get(i)));
        Code {
            bits,
            levels: self.levels.len() as u8,
        }
    }

    pub fn codes(&self) -> Vec<Code> {
        (0..self.len()).map(|i| self.code(i)).collect()
    }
}

/// Residual-encodes every element of `x` under `sf`.
pub fn encode(x: &[f64], sf: &ScalingFactors) -> Result<ResidualEncoding> {
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::input(format!("cannot encode non-finite value {v}")));
    }
    let codes: Vec<Code> = x.iter().map(|&v| encode_scalar(v, sf.gammas()).0).collect();
    ResidualEncoding::from_codes(&codes, sf.levels())
}

/// Per-element `e = Σ γ_i · (2·bit_i − 1)`.
pub fn reconstruct(enc: &ResidualEncoding, sf: &ScalingFactors) -> Result<Vec<f64>> {
    check_levels(enc, sf)?;
    Ok((0..enc.len()).map(|j| enc.code(j).value(sf.gammas())).collect())
}

fn check_levels(enc: &ResidualEncoding, sf: &ScalingFactors) -> Result<()> {
    if enc.level_count() != sf.levels() {
        return Err(Error::shape(format!(
            "encoding has {} levels but {} scaling factors were given",
            enc.level_count(),
            sf.levels()
        )));
    }
    Ok(())
}

/// `Σ_i γ_i · (2·p_i − N)`: the dot product of the reconstructed features
/// with the sign vector `w`, before the weight scale is applied.
pub fn multi_level_accumulate(
    enc: &ResidualEncoding,
    w: &BitVector,
    sf: &ScalingFactors,
) -> Result<f64> {
    check_levels(enc, sf)?;
    if w.len() != enc.len() {
        return Err(Error::shape(format!(
            "weight row has {} elements, features have {}",
            w.len(),
            enc.len()
        )));
    }
    let n = enc.len();
    let mut acc = 0.0;
    for (level, &g) in enc.levels().iter().zip(sf.gammas()) {
        let p = level.xnor_popcount(w)?;
        acc += g * popcount_to_dot(p, n) as f64;
    }
    Ok(acc)
}

/// Dot product of an `M`-level encoded feature vector with a scaled binary
/// weight row, computed with `M` XnorPopcount operations.
pub fn multi_level_dot(
    enc: &ResidualEncoding,
    w: &BitVector,
    sf: &ScalingFactors,
    gamma_w: f64,
) -> Result<f64> {
    Ok(gamma_w * multi_level_accumulate(enc, w, sf)?)
}

/// Maximum of two codes by unsigned comparison, level 1 most significant.
///
/// Only orders the reconstructed values correctly when the owning scaling
/// factors are superincreasing; see [`pool_max`] for the general case.
pub fn encoded_max(a: Code, b: Code) -> Result<Code> {
    if a.levels() != b.levels() {
        return Err(Error::shape(format!(
            "cannot compare {}-level and {}-level codes",
            a.levels(),
            b.levels()
        )));
    }
    Ok(if b.bits > a.bits { b } else { a })
}

/// Maximum over a window of codes.
///
/// Uses the code comparator when `sf` is superincreasing and falls back to
/// comparing reconstructed values otherwise. Ties keep the earliest code.
pub fn pool_max(codes: &[Code], sf: &ScalingFactors) -> Result<Code> {
    let (&first, rest) = codes
        .split_first()
        .ok_or_else(|| Error::input("max over an empty window"))?;
    if first.levels() != sf.levels() {
        return Err(Error::shape("code levels do not match scaling factors"));
    }
    if sf.is_superincreasing() {
        rest.iter().try_fold(first, |m, &c| encoded_max(m, c))
    } else {
        let mut best = first;
        let mut best_value = first.value(sf.gammas());
        for &c in rest {
            if c.levels() != best.levels() {
                return Err(Error::shape("mixed code levels in pooling window"));
            }
            let v = c.value(sf.gammas());
            if v > best_value {
                best = c;
                best_value = v;
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sf(g: &[f64]) -> ScalingFactors {
        ScalingFactors::new(g.to_vec()).unwrap()
    }

    fn bits(code: Code) -> Vec<bool> {
        (0..code.levels()).map(|i| code.level_bit(i)).collect()
    }

    #[test]
    fn encode_hand_traces() {
        let s = sf(&[0.5, 0.25]);
        let enc = encode(&[0.3, -0.6, 0.0], &s).unwrap();
        assert_eq!(bits(enc.code(0)), [true, false]);
        assert_eq!(bits(enc.code(1)), [false, false]);
        assert_eq!(bits(enc.code(2)), [true, false]);
        assert_eq!(reconstruct(&enc, &s).unwrap(), vec![0.25, -0.75, 0.25]);
    }

    #[test]
    fn zero_residual_encodes_positive() {
        let s = sf(&[0.5, 0.25, 0.125]);
        let (code, res) = encode_scalar(0.5, s.gammas());
        assert_eq!(bits(code), [true, true, false]);
        assert_eq!(res, vec![0.5, 0.0, -0.25]);
        let (code, _) = encode_scalar(0.5, &[0.5, 0.25]);
        assert_eq!(bits(code), [true, true]);
        let (code, _) = encode_scalar(0.0, &[1.0]);
        assert_eq!(bits(code), [true]);
    }

    #[test]
    fn zero_input_level_one_is_positive() {
        let s = sf(&[0.5, 0.25]);
        let (code, _) = encode_scalar(0.0, s.gammas());
        assert!(code.level_bit(0));
    }

    #[test]
    fn encode_rejects_non_finite() {
        assert!(matches!(encode(&[f64::NAN], &sf(&[1.0])), Err(Error::Input(_))));
        assert!(encode(&[f64::INFINITY], &sf(&[1.0])).is_err());
    }

    #[test]
    fn scaling_factor_validation() {
        assert!(ScalingFactors::new(vec![]).is_err());
        assert!(ScalingFactors::new(vec![1.0, 0.0]).is_err());
        assert!(ScalingFactors::new(vec![f64::NAN]).is_err());
        assert!(ScalingFactors::new(vec![-1.0]).is_ok());
    }

    #[test]
    fn reconstruct_examples() {
        let s = sf(&[0.5, 0.25]);
        let enc = ResidualEncoding::from_levels(vec![
            BitVector::from_bits(&[true, true]),
            BitVector::from_bits(&[false, true]),
        ])
        .unwrap();
        assert_eq!(reconstruct(&enc, &s).unwrap(), vec![0.25, 0.75]);
        assert!(reconstruct(&enc, &sf(&[1.0])).is_err());
    }

    #[test]
    fn one_level_reconstruct_is_sign() {
        let s = sf(&[1.0]);
        let xs = [0.7, -0.2, 0.0, -3.0];
        let enc = encode(&xs, &s).unwrap();
        assert_eq!(reconstruct(&enc, &s).unwrap(), vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn multi_level_dot_example() {
        let s = sf(&[0.5, 0.25]);
        // reconstructs to (0.75, -0.25, 0.25)
        let codes = [
            Code::from_level_bits(&[true, true]).unwrap(),
            Code::from_level_bits(&[false, true]).unwrap(),
            Code::from_level_bits(&[true, false]).unwrap(),
        ];
        let enc = ResidualEncoding::from_codes(&codes, 2).unwrap();
        assert_eq!(reconstruct(&enc, &s).unwrap(), vec![0.75, -0.25, 0.25]);
        let w = BitVector::from_bits(&[true, true, false]);
        assert_eq!(enc.levels()[0].xnor_popcount(&w).unwrap(), 1);
        assert_eq!(enc.levels()[1].xnor_popcount(&w).unwrap(), 3);
        assert_eq!(multi_level_dot(&enc, &w, &s, 1.0).unwrap(), 0.25);
    }

    #[test]
    fn multi_level_dot_single_level_reduces_to_popcount() {
        let enc = encode(&[1.0, -1.0, 1.0, 1.0, -1.0], &sf(&[1.0])).unwrap();
        let w = BitVector::from_bits(&[true, true, false, true, false]);
        let p = enc.levels()[0].xnor_popcount(&w).unwrap();
        assert_eq!(
            multi_level_dot(&enc, &w, &sf(&[1.0]), 1.0).unwrap(),
            popcount_to_dot(p, 5) as f64
        );
    }

    #[test]
    fn multi_level_dot_constant_vector() {
        let s = sf(&[0.5, 0.25]);
        let enc = encode(&[0.0; 4], &s).unwrap();
        let w = BitVector::ones(4);
        // x = 0: s_1 = +1, r_2 = -0.5, s_2 = -1, so e = 0.25 per element
        let recon = reconstruct(&enc, &s).unwrap();
        assert_eq!(recon, vec![0.25; 4]);
        assert_eq!(multi_level_dot(&enc, &w, &s, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn multi_level_dot_shape_errors() {
        let s = sf(&[1.0]);
        let enc = encode(&[1.0, 2.0], &s).unwrap();
        assert!(multi_level_dot(&enc, &BitVector::ones(3), &s, 1.0).is_err());
        assert!(multi_level_dot(&enc, &BitVector::ones(2), &sf(&[1.0, 0.5]), 1.0).is_err());
    }

    #[test]
    fn superincreasing_examples() {
        assert!(is_superincreasing(&[0.5, 0.25]));
        assert!(!is_superincreasing(&[3.0, 2.9, 2.8]));
        assert!(is_superincreasing(&[1.0]));
        assert!(!is_superincreasing(&[-1.0]));
        assert!(!is_superincreasing(&[1.0, 0.5, 0.5]));
    }

    #[test]
    fn encoded_max_examples() {
        let a = Code::from_level_bits(&[true, false]).unwrap();
        let b = Code::from_level_bits(&[false, true]).unwrap();
        assert_eq!(a.value(&[0.5, 0.25]), 0.25);
        assert_eq!(b.value(&[0.5, 0.25]), -0.25);
        assert_eq!(encoded_max(a, b).unwrap(), a);
        assert_eq!(encoded_max(a, a).unwrap(), a);
        let c = Code::from_level_bits(&[true]).unwrap();
        assert!(encoded_max(a, c).is_err());
    }

    #[test]
    fn counterexample_routes_to_fallback() {
        let s = sf(&[3.0, 2.9, 2.8]);
        let a = Code::from_level_bits(&[false, true, true]).unwrap();
        let b = Code::from_level_bits(&[true, false, false]).unwrap();
        assert!((a.value(s.gammas()) - 2.7).abs() < 1e-12);
        assert!((b.value(s.gammas()) + 2.7).abs() < 1e-12);
        assert_eq!(encoded_max(a, b).unwrap(), b);
        assert!(!s.is_superincreasing());
        assert_eq!(pool_max(&[a, b], &s).unwrap(), a);
        assert_eq!(pool_max(&[b, a], &s).unwrap(), a);
    }

    #[test]
    fn encoded_max_exhaustive_superincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in 1..=4usize {
            for _ in 0..20 {
                let mut g = vec![0.0; m];
                let mut tail = 0.0;
                for i in (0..m).rev() {
                    g[i] = tail + rng.gen_range(0.01..1.0);
                    tail += g[i];
                }
                assert!(is_superincreasing(&g));
                for a in 0..(1u32 << m) {
                    for b in 0..(1u32 << m) {
                        let (ca, cb) = (Code::new(a, m).unwrap(), Code::new(b, m).unwrap());
                        let (va, vb) = (ca.value(&g), cb.value(&g));
                        let want = if vb > va { cb } else { ca };
                        assert_eq!(encoded_max(ca, cb).unwrap(), want);
                    }
                }
            }
        }
    }

    #[test]
    fn approximation_improves_with_greedy_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let xs: Vec<f64> = (0..256).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut gammas = vec![xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len() as f64];
            for _ in 1..4 {
                let enc = encode(&xs, &sf(&gammas)).unwrap();
                let prev = reconstruct(&enc, &sf(&gammas)).unwrap();
                let err_prev: f64 =
                    xs.iter().zip(&prev).map(|(x, e)| (x - e).abs()).sum::<f64>();
                let mean_abs_residual =
                    xs.iter().zip(&prev).map(|(x, e)| (x - e).abs()).sum::<f64>()
                        / xs.len() as f64;
                gammas.push(mean_abs_residual);
                let enc = encode(&xs, &sf(&gammas)).unwrap();
                let next = reconstruct(&enc, &sf(&gammas)).unwrap();
                let err_next: f64 =
                    xs.iter().zip(&next).map(|(x, e)| (x - e).abs()).sum::<f64>();
                assert!(err_next <= err_prev + 1e-12, "{err_next} > {err_prev}");
            }
        }
    }

    proptest! {
        #[test]
        fn residual_contraction(
            x in -8.0f64..8.0,
            g in prop::collection::vec(0.01f64..4.0, 1..6),
        ) {
            let (_, r) = encode_scalar(x, &g);
            for i in 0..g.len() - 1 {
                let lhs = r[i + 1].abs();
                let rhs = (r[i].abs() - g[i]).abs();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + r[i].abs() + g[i]));
            }
        }

        #[test]
        fn codes_round_trip_through_planes(
            codes in prop::collection::vec(0u32..8, 0..100),
        ) {
            let cs: Vec<Code> = codes.iter().map(|&c| Code::new(c, 3).unwrap()).collect();
            if cs.is_empty() {
                return Ok(());
            }
            let enc = ResidualEncoding::from_codes(&cs, 3).unwrap();
            prop_assert_eq!(enc.codes(), cs);
        }
    }
}
