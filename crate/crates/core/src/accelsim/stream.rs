use crate::bitcore::{BitVector, WORD_BITS};
use crate::error::{Error, Result};
use crate::netgraph::forward::window_indices;
use crate::netgraph::Shape;
use crate::residual::ResidualEncoding;

/// Sliding-window geometry of one matrix-vector layer. A dense layer is a
/// single window covering the whole input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub shape: Shape,
    pub kernel: usize,
    pub stride: usize,
}

impl Window {
    pub fn dense(len: usize) -> Self {
        Window {
            shape: Shape::vector(len),
            kernel: 1,
            stride: 1,
        }
    }

    pub fn output_dims(&self) -> Result<(usize, usize)> {
        let s = self.shape;
        if self.kernel == 0 || self.stride == 0 || s.height < self.kernel || s.width < self.kernel {
            return Err(Error::Geometry(format!(
                "{}x{} map cannot hold a {}x{} window",
                s.height, s.width, self.kernel, self.kernel
            )));
        }
        Ok((
            (s.height - self.kernel) / self.stride + 1,
            (s.width - self.kernel) / self.stride + 1,
        ))
    }

    pub fn count(&self) -> Result<usize> {
        let (h, w) = self.output_dims()?;
        Ok(h * w)
    }

    /// Dot-product length: `kernel² · channels`.
    pub fn len(&self) -> usize {
        self.kernel * self.kernel * self.shape.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input indices of every window, in row-major window order.
    pub(crate) fn indices(&self) -> Result<Vec<Vec<usize>>> {
        let (h, w) = self.output_dims()?;
        let mut out = Vec::with_capacity(h * w);
        for oy in 0..h {
            for ox in 0..w {
                out.push(window_indices(self.shape, self.kernel, self.stride, oy, ox).collect());
            }
        }
        Ok(out)
    }
}

/// Words produced by the sliding-window unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stream {
    /// `simd`-bit words; for each window, `synapse_fold` groups of `levels`
    /// words in level order.
    Binary {
        words: Vec<u64>,
        simd: usize,
        levels: usize,
    },
    /// Raw fixed-point values, `simd` per group, zero padded.
    Fixed { values: Vec<i64>, simd: usize },
}

impl Stream {
    /// Number of bus transfers (words for binary streams, groups for fixed).
    pub fn transfers(&self) -> usize {
        match self {
            Stream::Binary { words, .. } => words.len(),
            Stream::Fixed { values, simd } => values.len() / simd,
        }
    }
}

fn check_simd(simd: usize) -> Result<()> {
    if simd == 0 || simd > WORD_BITS {
        return Err(Error::input(format!("SIMD width {simd} outside 1..={WORD_BITS}")));
    }
    Ok(())
}

/// Serializes a code map into the binary word stream consumed by an MVTU.
pub fn swu_stream(enc: &ResidualEncoding, window: Window, simd: usize) -> Result<Stream> {
    check_simd(simd)?;
    if enc.len() != window.shape.len() {
        return Err(Error::shape(format!(
            "{} codes for a {:?} map",
            enc.len(),
            window.shape
        )));
    }
    let levels = enc.levels();
    let mut words = Vec::new();
    for idx in window.indices()? {
        for group in idx.chunks(simd) {
            for level in levels {
                let mut word = 0u64;
                for (lane, &i) in group.iter().enumerate() {
                    word |= u64::from(level.get(i)) << lane;
                }
                words.push(word);
            }
        }
    }
    Ok(Stream::Binary {
        words,
        simd,
        levels: levels.len(),
    })
}

/// Serializes a raw fixed-point map for the first layer.
pub fn swu_stream_fixed(raw: &[i64], window: Window, simd: usize) -> Result<Stream> {
    check_simd(simd)?;
    if raw.len() != window.shape.len() {
        return Err(Error::shape(format!(
            "{} values for a {:?} map",
            raw.len(),
            window.shape
        )));
    }
    let mut values = Vec::new();
    for idx in window.indices()? {
        for group in idx.chunks(simd) {
            values.extend(group.iter().map(|&i| raw[i]));
            values.resize(values.len() + simd - group.len(), 0);
        }
    }
    Ok(Stream::Fixed { values, simd })
}

/// `width` bits of a packed vector starting at `offset`, zero beyond its end.
pub(crate) fn bits_at(v: &BitVector, offset: usize, width: usize) -> u64 {
    let words = v.words();
    let w = offset / WORD_BITS;
    let b = offset % WORD_BITS;
    let mut out = words.get(w).map_or(0, |x| x >> b);
    if b != 0 {
        if let Some(next) = words.get(w + 1) {
            out |= next << (WORD_BITS - b);
        }
    }
    let valid = width.min(v.len().saturating_sub(offset));
    if valid >= WORD_BITS {
        out
    } else {
        out & ((1u64 << valid) - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual::{encode, ScalingFactors};
    use proptest::prelude::*;

    fn enc(values: &[f64], levels: usize) -> ResidualEncoding {
        encode(values, &ScalingFactors::geometric(1.0, levels).unwrap()).unwrap()
    }

    #[test]
    fn single_window_single_word() {
        let e = enc(&[0.5, -0.5, 1.0, -2.0], 1);
        let w = Window {
            shape: Shape::new(2, 2, 1),
            kernel: 2,
            stride: 1,
        };
        let s = swu_stream(&e, w, 8).unwrap();
        assert_eq!(
            s,
            Stream::Binary {
                words: vec![0b0101],
                simd: 8,
                levels: 1
            }
        );
    }

    #[test]
    fn levels_double_the_words() {
        let vals: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = Window {
            shape: Shape::new(4, 4, 3),
            kernel: 3,
            stride: 1,
        };
        let one = swu_stream(&enc(&vals, 1), w, 4).unwrap();
        let two = swu_stream(&enc(&vals, 2), w, 4).unwrap();
        assert_eq!(two.transfers(), 2 * one.transfers());
        // 4 windows of 27 values in 7 groups
        assert_eq!(one.transfers(), 4 * 7);
    }

    #[test]
    fn matches_materialized_im2col() {
        let vals: Vec<f64> = (0..16).map(|i| if (i * 7) % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let e = enc(&vals, 1);
        let w = Window {
            shape: Shape::new(4, 4, 1),
            kernel: 3,
            stride: 1,
        };
        let Stream::Binary { words, .. } = swu_stream(&e, w, 9).unwrap() else {
            unreachable!()
        };
        let mut expected = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut word = 0u64;
                let mut lane = 0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        if vals[(oy + ky) * 4 + ox + kx] >= 0.0 {
                            word |= 1 << lane;
                        }
                        lane += 1;
                    }
                }
                expected.push(word);
            }
        }
        assert_eq!(words, expected);
    }

    #[test]
    fn geometry_errors() {
        let e = enc(&[1.0; 4], 1);
        let w = Window {
            shape: Shape::new(2, 2, 1),
            kernel: 3,
            stride: 1,
        };
        assert!(matches!(swu_stream(&e, w, 8), Err(Error::Geometry(_))));
        assert!(swu_stream(&e, Window::dense(4), 65).is_err());
        assert!(swu_stream(&e, Window::dense(5), 8).is_err());
    }

    #[test]
    fn fixed_stream_pads_with_zeros() {
        let s = swu_stream_fixed(&[1, 2, 3], Window::dense(3), 2).unwrap();
        assert_eq!(
            s,
            Stream::Fixed {
                values: vec![1, 2, 3, 0],
                simd: 2
            }
        );
    }

    proptest! {
        #[test]
        fn bits_at_matches_get(bits in prop::collection::vec(any::<bool>(), 1..200), off in 0usize..200, width in 1usize..=64) {
            let v = BitVector::from_bits(&bits);
            let got = bits_at(&v, off, width);
            for k in 0..64 {
                let expect = k < width && off + k < bits.len() && bits[off + k];
                prop_assert_eq!((got >> k) & 1 == 1, expect);
            }
        }
    }
}
