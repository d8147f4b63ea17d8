//! Binary container for exported models and training checkpoints.
//!
//! ```text
//! "RBNM" | version u16 | manifest length u32 | manifest (canonical JSON)
//!        | blob length u64 | blob | CRC32 u32
//! ```
//!
//! All integers are little-endian. The manifest holds the layer structure,
//! scaling factors, and format; the blob holds packed weight words (`u64`,
//! BitVector bit order) followed by per-layer `α`/`β` (`f64`), in layer
//! order. The CRC covers every preceding byte. Manifests are serialized with
//! sorted keys and shortest round-trip floats, so equal models give equal
//! bytes.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde_json::{json, Map, Value};

use crate::bitcore::{words_for, BitVector};
use crate::error::{Error, Result};
use crate::fixed::FixedPointFormat;
use crate::netgraph::{BatchNorm, ConvLayer, DenseLayer, Layer, Model, Parallelism, Shape};
use crate::residual::ScalingFactors;
use crate::train::{LayerParams, ParamState, Params, RunningStats, TrainConfig};

pub const MAGIC: &[u8; 4] = b"RBNM";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Container {
    Model(Model),
    Checkpoint(ParamState),
}

#[derive(Default)]
struct Blob {
    bytes: Vec<u8>,
}

impl Blob {
    fn words(&mut self, w: &[u64]) {
        for v in w {
            self.bytes.extend(v.to_le_bytes());
        }
    }

    fn floats<'a>(&mut self, xs: impl IntoIterator<Item = &'a f64>) {
        for v in xs {
            self.bytes.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("blob shorter than the manifest describes".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.u64s(n)?.into_iter().map(f64::from_bits).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing blob bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn frame(manifest: &Value, blob: &[u8]) -> Result<Vec<u8>> {
    let text = serde_json::to_vec(manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mlen = u32::try_from(text.len()).map_err(|_| Error::Format("manifest too large".into()))?;
    let mut out = Vec::with_capacity(4 + 2 + 4 + text.len() + 8 + blob.len() + 4);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(mlen.to_le_bytes());
    out.extend(&text);
    out.extend((blob.len() as u64).to_le_bytes());
    out.extend(blob);
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

/// Checks framing and CRC; returns the parsed manifest and the blob.
fn unframe(bytes: &[u8]) -> Result<(Value, &[u8])> {
    if bytes.len() < 4 + 2 + 4 + 8 + 4 {
        return Err(Error::Integrity(format!("container is only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    if &body[..4] != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mlen = u32::from_le_bytes(body[6..10].try_into().expect("four bytes")) as usize;
    let blob_at = 10usize
        .checked_add(mlen)
        .filter(|&e| e + 8 <= body.len())
        .ok_or_else(|| Error::Format("manifest length exceeds container".into()))?;
    let text = &body[10..blob_at];
    let blen = u64::from_le_bytes(body[blob_at..blob_at + 8].try_into().expect("eight bytes"));
    if blen != (body.len() - blob_at - 8) as u64 {
        return Err(Error::Format("blob length does not match container size".into()));
    }
    let manifest: Value = serde_json::from_slice(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let canonical = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    if canonical != text {
        return Err(Error::Format("manifest is not in canonical form".into()));
    }
    Ok((manifest, &body[blob_at + 8..]))
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))
}

fn as_usize(v: &Value, key: &str) -> Result<usize> {
    field(v, key)?
        .as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Format(format!("`{key}` must be a non-negative integer")))
}

fn as_f64(v: &Value, key: &str) -> Result<f64> {
    field(v, key)?
        .as_f64()
        .ok_or_else(|| Error::Format(format!("`{key}` must be a number")))
}

fn as_str<'a>(v: &'a Value, key: &str) -> Result<&'a str> {
    field(v, key)?
        .as_str()
        .ok_or_else(|| Error::Format(format!("`{key}` must be a string")))
}

fn as_f64_vec(v: &Value, key: &str) -> Result<Vec<f64>> {
    field(v, key)?
        .as_array()
        .ok_or_else(|| Error::Format(format!("`{key}` must be an array")))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| Error::Format(format!("`{key}` must hold numbers"))))
        .collect()
}

fn kind_of(manifest: &Value) -> Result<&str> {
    as_str(manifest, "kind")
}

fn shape_json(s: Shape) -> Value {
    json!({"height": s.height, "width": s.width, "channels": s.channels})
}

fn shape_from(v: &Value) -> Result<Shape> {
    Ok(Shape::new(as_usize(v, "height")?, as_usize(v, "width")?, as_usize(v, "channels")?))
}

fn rows_from(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<Vec<BitVector>> {
    (0..rows)
        .map(|_| BitVector::from_words(cols, r.u64s(words_for(cols))?))
        .collect::<Result<_>>()
        .map_err(|e| Error::Format(format!("weight rows: {e}")))
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let mut blob = Blob::default();
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let entry = match layer {
            Layer::Dense(d) => {
                for row in &d.weights {
                    blob.words(row.words());
                }
                json!({
                    "type": "dense",
                    "in_features": d.in_features,
                    "out_features": d.out_features,
                    "weight_gamma": d.weight_gamma,
                    "pe": d.parallelism.pe,
                    "simd": d.parallelism.simd,
                })
            }
            Layer::Conv(c) => {
                for row in &c.weights {
                    blob.words(row.words());
                }
                json!({
                    "type": "conv",
                    "kernel": c.kernel,
                    "stride": c.stride,
                    "in_channels": c.in_channels,
                    "out_channels": c.out_channels,
                    "weight_gamma": c.weight_gamma,
                    "pe": c.parallelism.pe,
                    "simd": c.parallelism.simd,
                })
            }
            Layer::BatchNorm(bn) => {
                blob.floats(&bn.alpha);
                blob.floats(&bn.beta);
                json!({"type": "batchnorm", "channels": bn.alpha.len()})
            }
            Layer::ResidualActivation(sf) => json!({
                "type": "residual_activation",
                "gammas": sf.gammas(),
                "superincreasing": sf.is_superincreasing(),
            }),
            Layer::MaxPool { window } => json!({"type": "maxpool", "window": window}),
            Layer::Softmax => json!({"type": "softmax"}),
        };
        layers.push(entry);
    }
    let manifest = json!({
        "kind": "model",
        "name": model.name,
        "input": shape_json(model.input),
        "levels": model.levels,
        "format": {"total_bits": model.format.total_bits, "fraction_bits": model.format.fraction_bits},
        "superincreasing": model.all_superincreasing(),
        "layers": layers,
    });
    frame(&manifest, &blob.bytes)
}

fn model_from(manifest: &Value, blob: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes: blob, pos: 0 };
    let fmt = field(manifest, "format")?;
    let format = FixedPointFormat::new(
        as_usize(fmt, "total_bits")? as u32,
        as_usize(fmt, "fraction_bits")? as u32,
    )?;
    let entries = field(manifest, "layers")?
        .as_array()
        .ok_or_else(|| Error::Format("`layers` must be an array".into()))?;
    let mut layers = Vec::with_capacity(entries.len());
    for e in entries {
        let par = || -> Result<Parallelism> { Ok(Parallelism::new(as_usize(e, "pe")?, as_usize(e, "simd")?)) };
        let layer = match as_str(e, "type")? {
            "dense" => {
                let (cols, rows) = (as_usize(e, "in_features")?, as_usize(e, "out_features")?);
                Layer::Dense(DenseLayer {
                    in_features: cols,
                    out_features: rows,
                    weights: rows_from(&mut r, rows, cols)?,
                    weight_gamma: as_f64(e, "weight_gamma")?,
                    parallelism: par()?,
                })
            }
            "conv" => {
                let kernel = as_usize(e, "kernel")?;
                let in_channels = as_usize(e, "in_channels")?;
                let rows = as_usize(e, "out_channels")?;
                let cols = kernel
                    .checked_mul(kernel)
                    .and_then(|k| k.checked_mul(in_channels))
                    .ok_or_else(|| Error::Format("conv window size overflows".into()))?;
                Layer::Conv(ConvLayer {
                    kernel,
                    stride: as_usize(e, "stride")?,
                    in_channels,
                    out_channels: rows,
                    weights: rows_from(&mut r, rows, cols)?,
                    weight_gamma: as_f64(e, "weight_gamma")?,
                    parallelism: par()?,
                })
            }
            "batchnorm" => {
                let n = as_usize(e, "channels")?;
                Layer::BatchNorm(BatchNorm {
                    alpha: r.f64s(n)?,
                    beta: r.f64s(n)?,
                })
            }
            "residual_activation" => Layer::ResidualActivation(
                ScalingFactors::new(as_f64_vec(e, "gammas")?).map_err(|e| Error::Format(e.to_string()))?,
            ),
            "maxpool" => Layer::MaxPool {
                window: as_usize(e, "window")?,
            },
            "softmax" => Layer::Softmax,
            other => return Err(Error::Format(format!("unknown layer type `{other}`"))),
        };
        layers.push(layer);
    }
    r.finish()?;
    let model = Model {
        name: as_str(manifest, "name")?.to_string(),
        input: shape_from(field(manifest, "input")?)?,
        levels: as_usize(manifest, "levels")?,
        format,
        layers,
    };
    model.validate()?;
    Ok(model)
}

fn params_json(p: &Params) -> Value {
    json!({
        "layers": p.layers.iter().map(|l| json!({"rows": l.weights.nrows(), "cols": l.weights.ncols()})).collect::<Vec<_>>(),
        "levels": p.gammas.iter().map(|g| g.len()).collect::<Vec<_>>(),
    })
}

pub fn encode_checkpoint(state: &ParamState) -> Result<Vec<u8>> {
    let mut blob = Blob::default();
    for p in [&state.params, &state.first_moment, &state.second_moment] {
        for g in p.groups() {
            blob.floats(g);
        }
    }
    for rs in &state.running {
        blob.floats(rs.mean.iter());
        blob.floats(rs.var.iter());
    }
    let config = serde_json::to_value(&state.config).map_err(|e| Error::Format(e.to_string()))?;
    let manifest = json!({
        "kind": "checkpoint",
        "widths": state.widths,
        "config": config,
        "step": state.step,
        "epoch": state.epoch,
        "params": params_json(&state.params),
    });
    frame(&manifest, &blob.bytes)
}

fn params_from(r: &mut Reader<'_>, widths: &[usize], levels: usize) -> Result<Params> {
    let layers = widths
        .windows(2)
        .map(|w| {
            Ok(LayerParams {
                weights: Array2::from_shape_vec((w[1], w[0]), r.f64s(w[1] * w[0])?).expect("sized"),
                weight_gamma: r.f64s(1)?[0],
                bn_gain: Array1::from(r.f64s(w[1])?),
                bn_bias: Array1::from(r.f64s(w[1])?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gammas = (0..widths.len() - 2)
        .map(|_| Ok(Array1::from(r.f64s(levels)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Params { layers, gammas })
}

fn checkpoint_from(manifest: &Value, blob: &[u8]) -> Result<ParamState> {
    let widths: Vec<usize> = serde_json::from_value(field(manifest, "widths")?.clone())
        .map_err(|e| Error::Format(format!("widths: {e}")))?;
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Format(format!("invalid widths {widths:?}")));
    }
    let config: TrainConfig = serde_json::from_value(field(manifest, "config")?.clone())
        .map_err(|e| Error::Format(format!("config: {e}")))?;
    config.validate()?;
    let mut r = Reader { bytes: blob, pos: 0 };
    let params = params_from(&mut r, &widths, config.levels)?;
    let first_moment = params_from(&mut r, &widths, config.levels)?;
    let second_moment = params_from(&mut r, &widths, config.levels)?;
    let running = widths[1..]
        .iter()
        .map(|&w| {
            Ok(RunningStats {
                mean: Array1::from(r.f64s(w)?),
                var: Array1::from(r.f64s(w)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let state = ParamState {
        widths,
        config,
        params,
        first_moment,
        second_moment,
        running,
        step: field(manifest, "step")?
            .as_u64()
            .ok_or_else(|| Error::Format("`step` must be an integer".into()))?,
        epoch: as_usize(manifest, "epoch")?,
    };
    if params_json(&state.params) != *field(manifest, "params")? {
        return Err(Error::Format("parameter layout does not match widths".into()));
    }
    Ok(state)
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    match c {
        Container::Model(m) => encode_model(m),
        Container::Checkpoint(s) => encode_checkpoint(s),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let (manifest, blob) = unframe(bytes)?;
    match kind_of(&manifest)? {
        "model" => Ok(Container::Model(model_from(&manifest, blob)?)),
        "checkpoint" => Ok(Container::Checkpoint(checkpoint_from(&manifest, blob)?)),
        other => Err(Error::Format(format!("unknown container kind `{other}`"))),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    match decode(bytes)? {
        Container::Model(m) => Ok(m),
        Container::Checkpoint(_) => Err(Error::input("expected a model container, found a checkpoint")),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamState> {
    match decode(bytes)? {
        Container::Checkpoint(s) => Ok(s),
        Container::Model(_) => Err(Error::input("expected a checkpoint, found a model container")),
    }
}

/// The parsed manifest of a container, after integrity checks.
pub fn manifest(bytes: &[u8]) -> Result<Map<String, Value>> {
    match unframe(bytes)?.0 {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Format("manifest must be an object".into())),
    }
}

pub fn save(path: &Path, c: &Container) -> Result<()> {
    fs::write(path, encode(c)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Container> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::random::{random_model, RandomSpec};
    use crate::train::TrainConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn model_round_trip_is_byte_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = random_model(&mut rng, RandomSpec::default()).unwrap();
            let bytes = encode_model(&m).unwrap();
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode_model(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let m = crate::netgraph::arch1(1).unwrap();
        let bytes = encode_model(&m).unwrap();
        assert_eq!(&bytes[..4], b"RBNM");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let man = manifest(&bytes).unwrap();
        assert_eq!(man["kind"], "model");
        assert_eq!(man["superincreasing"], true);
        // keys come out sorted
        let keys: Vec<&String> = man.keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_model(&mut rng, RandomSpec::default()).unwrap();
        let bytes = encode_model(&m).unwrap();
        for bit in 0..bytes.len() * 8 {
            let mut bad = bytes.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert!(matches!(decode(&bad), Err(Error::Integrity(_))), "bit {bit}");
        }
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode_model(&crate::netgraph::arch1(1).unwrap()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Integrity(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Integrity(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = TrainConfig {
            levels: 2,
            seed: 3,
            ..Default::default()
        };
        let mut s = ParamState::seeded(&[5, 4, 3, 2], &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in s.first_moment.groups_mut() {
            for v in g {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        s.step = 17;
        s.epoch = 2;
        let bytes = encode_checkpoint(&s).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(decode_model(&bytes).is_err());
    }
}
