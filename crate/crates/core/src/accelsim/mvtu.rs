use super::stream::{bits_at, Stream};
use super::LayerSchedule;
use crate::bitcore::BitVector;
use crate::error::{Error, Result};
use crate::fixed::{shift_round_even, FixedPointFormat};
use crate::residual::Code;

/// Raw fixed-point parameters of one MVTU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MvtuParams {
    pub format: FixedPointFormat,
    /// Scales of the incoming residual levels; `None` for fixed-point input.
    pub input_gammas: Option<Vec<i64>>,
    pub weight_gamma: i64,
    pub alpha: Vec<i64>,
    pub beta: Vec<i64>,
    /// Scales of the output encoder; `None` leaves outputs normalized.
    pub output_gammas: Option<Vec<i64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MvtuOutput {
    /// Normalized raw values, window-major then neuron.
    pub normalized: Vec<i64>,
    pub codes: Option<Vec<Code>>,
    pub cycles: u64,
}

/// Greedy residual encoding on raw integers.
pub fn encode_raw(x: i64, gammas: &[i64]) -> Result<Code> {
    let mut r = x;
    let mut bits = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let pos = r >= 0;
        bits.push(pos);
        r = if pos { r - g } else { r + g };
    }
    Code::from_level_bits(&bits)
}

/// `round(α·γ_w·acc − β)` carried out in integers: `acc`, `γ_w`, `α`, `β`
/// are Q.f, so the product is Q.3f before the final rounding shift.
fn normalize_raw(acc: i128, weight_gamma: i64, alpha: i64, beta: i64, f: &FixedPointFormat) -> i64 {
    let frac = f.fraction_bits;
    let y = i128::from(weight_gamma) * acc;
    let t = i128::from(alpha) * y - (i128::from(beta) << (2 * frac));
    f.saturate(shift_round_even(t, 2 * frac))
}

/// Executes one folded matrix-vector-threshold unit over a word stream.
///
/// `pe` neuron banks each hold one popcount accumulator per level; every
/// cycle the unit consumes one `simd`-lane word per bank. The window buffer
/// is replayed for every neuron fold.
pub fn mvtu_exec(
    schedule: &LayerSchedule,
    weights: &[BitVector],
    params: &MvtuParams,
    stream: &Stream,
) -> Result<MvtuOutput> {
    let s = schedule;
    if weights.len() != s.rows || weights.iter().any(|w| w.len() != s.cols) {
        return Err(Error::shape(format!(
            "MVTU expects {} weight rows of {} bits",
            s.rows, s.cols
        )));
    }
    if params.alpha.len() != s.rows || params.beta.len() != s.rows {
        return Err(Error::shape("one alpha/beta pair per neuron required"));
    }
    let sf = s.synapse_fold();
    let nf = s.neuron_fold();
    let m = s.levels;
    let lanes = |g: usize| (s.cols - g * s.simd).min(s.simd);
    let mask = |g: usize| {
        let l = lanes(g);
        if l == 64 {
            u64::MAX
        } else {
            (1u64 << l) - 1
        }
    };
    let wchunks: Vec<Vec<u64>> = weights
        .iter()
        .map(|row| (0..sf).map(|g| bits_at(row, g * s.simd, s.simd)).collect())
        .collect();
    let mut normalized = Vec::with_capacity(s.windows * s.rows);
    let mut codes = params.output_gammas.as_ref().map(|_| Vec::with_capacity(s.windows * s.rows));
    let mut cycles = 0u64;
    let per_window;
    match stream {
        Stream::Binary { words, simd, levels } => {
            let gammas = params
                .input_gammas
                .as_ref()
                .ok_or_else(|| Error::Stream("binary stream fed to a fixed-point MVTU".into()))?;
            if *simd != s.simd || *levels != m || gammas.len() != m {
                return Err(Error::Stream(format!(
                    "stream of {levels}x{simd}-bit words, MVTU expects {m}x{}",
                    s.simd
                )));
            }
            per_window = sf * m;
            if words.len() < per_window * s.windows {
                return Err(Error::Stream(format!(
                    "underrun: {} words for {} windows of {per_window}",
                    words.len(),
                    s.windows
                )));
            }
            let mut popc = vec![vec![0i64; m]; s.pe];
            for buf in words.chunks(per_window).take(s.windows) {
                for f in 0..nf {
                    for row in popc.iter_mut() {
                        row.fill(0);
                    }
                    for g in 0..sf {
                        let mk = mask(g);
                        for i in 0..m {
                            cycles += 1;
                            let a = buf[g * m + i];
                            for (p, acc) in popc.iter_mut().enumerate() {
                                let n = f * s.pe + p;
                                if n < s.rows {
                                    acc[i] += i64::from((!(a ^ wchunks[n][g]) & mk).count_ones());
                                }
                            }
                        }
                    }
                    for (p, acc) in popc.iter().enumerate() {
                        let n = f * s.pe + p;
                        if n >= s.rows {
                            continue;
                        }
                        let dot: i128 = acc
                            .iter()
                            .zip(gammas)
                            .map(|(&pc, &g)| i128::from(g) * i128::from(2 * pc - s.cols as i64))
                            .sum();
                        normalized.push(normalize_raw(
                            dot,
                            params.weight_gamma,
                            params.alpha[n],
                            params.beta[n],
                            &params.format,
                        ));
                    }
                }
            }
        }
        Stream::Fixed { values, simd } => {
            if params.input_gammas.is_some() {
                return Err(Error::Stream("fixed-point stream fed to a binary MVTU".into()));
            }
            if *simd != s.simd {
                return Err(Error::Stream(format!("{simd}-lane stream, MVTU expects {}", s.simd)));
            }
            per_window = sf * s.simd;
            if values.len() < per_window * s.windows {
                return Err(Error::Stream(format!(
                    "underrun: {} values for {} windows of {per_window}",
                    values.len(),
                    s.windows
                )));
            }
            let mut sums = vec![0i128; s.pe];
            for buf in values.chunks(per_window).take(s.windows) {
                // the fixed-point input stage converts each group once
                cycles += sf as u64;
                for f in 0..nf {
                    sums.fill(0);
                    for g in 0..sf {
                        let group = &buf[g * s.simd..g * s.simd + lanes(g)];
                        for i in 0..m {
                            cycles += 1;
                            if i != 0 {
                                continue;
                            }
                            for (p, acc) in sums.iter_mut().enumerate() {
                                let n = f * s.pe + p;
                                if n >= s.rows {
                                    continue;
                                }
                                let w = wchunks[n][g];
                                for (lane, &x) in group.iter().enumerate() {
                                    if (w >> lane) & 1 == 1 {
                                        *acc += i128::from(x);
                                    } else {
                                        *acc -= i128::from(x);
                                    }
                                }
                            }
                        }
                    }
                    for (p, &acc) in sums.iter().enumerate() {
                        let n = f * s.pe + p;
                        if n < s.rows {
                            normalized.push(normalize_raw(
                                acc,
                                params.weight_gamma,
                                params.alpha[n],
                                params.beta[n],
                                &params.format,
                            ));
                        }
                    }
                }
            }
        }
    }
    if stream.transfers() * stream_unit(stream) != per_window * s.windows {
        return Err(Error::Stream(format!(
            "overrun: stream holds more than {} windows",
            s.windows
        )));
    }
    if let (Some(out), Some(g)) = (codes.as_mut(), params.output_gammas.as_ref()) {
        for &v in &normalized {
            out.push(encode_raw(v, g)?);
        }
    }
    Ok(MvtuOutput {
        normalized,
        codes,
        cycles,
    })
}

fn stream_unit(stream: &Stream) -> usize {
    match stream {
        Stream::Binary { .. } => 1,
        Stream::Fixed { simd, .. } => *simd,
    }
}
