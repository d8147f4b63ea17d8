//! Dataset ingestion: IDX image/label pairs and CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::FixedPointFormat;
use crate::train::Dataset;

const IDX_U8_IMAGES: u32 = 0x0000_0803;
const IDX_U8_LABELS: u32 = 0x0000_0801;

/// How raw feature values are mapped before rounding onto the fixed-point
/// grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Normalization {
    /// Values used as is.
    Identity,
    /// `v / 255`, for 8-bit pixels.
    Unit8,
    /// `v * factor`.
    Scale(f64),
}

impl Normalization {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Normalization::Identity => v,
            Normalization::Unit8 => v / 255.0,
            Normalization::Scale(f) => v * f,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::Format(format!("{}: truncated IDX header", path.display())));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::Format(format!(
            "{}: IDX magic {found:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let shape: Vec<usize> = (0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = shape.iter().product::<usize>() + header;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, header implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(shape)
}

/// Reads an unsigned-byte IDX image file; returns `(count, rows·cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let shape = idx_header(&bytes, path, IDX_U8_IMAGES, 3)?;
    Ok((shape[0], shape[1] * shape[2], bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    idx_header(&bytes, path, IDX_U8_LABELS, 1)?;
    Ok(bytes[8..].to_vec())
}

pub fn load_idx(
    images: &Path,
    labels: &Path,
    classes: usize,
    norm: Normalization,
    format: FixedPointFormat,
) -> Result<Dataset> {
    let (n, dim, pixels) = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if lab.len() != n {
        return Err(Error::shape(format!(
            "{} has {n} images but {} has {} labels",
            images.display(),
            labels.display(),
            lab.len()
        )));
    }
    let features = Array2::from_shape_vec(
        (n, dim),
        pixels.iter().map(|&p| format.quantize(norm.apply(f64::from(p)))).collect(),
    )
    .expect("length checked by header");
    Dataset::new(features, lab.into_iter().map(usize::from).collect(), classes)
}

fn find_file(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(names[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
            )
        })
}

/// Loads one split of MNIST from a directory holding the standard IDX files
/// (`train-*` or `t10k-*`).
pub fn load_mnist_split(dir: &Path, train: bool, format: FixedPointFormat) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let file = |kind: &str, ext: &str| {
        find_file(
            dir,
            &[
                &format!("{prefix}-{kind}-{ext}"),
                &format!("{prefix}-{kind}.{ext}"),
            ],
        )
    };
    load_idx(
        &file("images", "idx3-ubyte")?,
        &file("labels", "idx1-ubyte")?,
        10,
        Normalization::Unit8,
        format,
    )
}

/// Training and test splits of MNIST.
pub fn load_mnist(dir: &Path, format: FixedPointFormat) -> Result<(Dataset, Dataset)> {
    Ok((load_mnist_split(dir, true, format)?, load_mnist_split(dir, false, format)?))
}

/// Reads comma-separated rows of features followed by an integer label.
///
/// A first line that does not parse as numbers is treated as a header.
/// `classes` defaults to one more than the largest label.
pub fn load_csv(
    path: &Path,
    classes: Option<usize>,
    norm: Normalization,
    format: FixedPointFormat,
) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if lineno == 0 => continue,
            Err(e) => {
                return Err(Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)));
            }
        };
        let (label, feats) = values.split_last().ok_or_else(|| Error::Format("empty row".into()))?;
        if feats.is_empty() || label.fract() != 0.0 || *label < 0.0 {
            return Err(Error::Format(format!(
                "{}:{}: expected features then a non-negative integer label",
                path.display(),
                lineno + 1
            )));
        }
        if let Some(first) = rows.first() {
            if first.len() != feats.len() {
                return Err(Error::shape(format!(
                    "{}:{}: {} features, earlier rows have {}",
                    path.display(),
                    lineno + 1,
                    feats.len(),
                    first.len()
                )));
            }
        }
        rows.push(feats.iter().map(|&v| format.quantize(norm.apply(v))).collect());
        labels.push(*label as usize);
    }
    if rows.is_empty() {
        return Err(Error::input(format!("{}: no data rows", path.display())));
    }
    let dim = rows[0].len();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Array2::from_shape_vec((rows.len(), dim), rows.concat()).expect("rectangular rows");
    Dataset::new(features, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, r: u32, c: u32, data: &[u8]) -> Vec<u8> {
        let mut v = IDX_U8_IMAGES.to_be_bytes().to_vec();
        for d in [n, r, c] {
            v.extend(d.to_be_bytes());
        }
        v.extend(data);
        v
    }

    fn idx_labels(data: &[u8]) -> Vec<u8> {
        let mut v = IDX_U8_LABELS.to_be_bytes().to_vec();
        v.extend((data.len() as u32).to_be_bytes());
        v.extend(data);
        v
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i");
        let lab = dir.path().join("l");
        fs::write(&img, idx_images(2, 1, 2, &[0, 255, 128, 1])).unwrap();
        fs::write(&lab, idx_labels(&[3, 9])).unwrap();
        let d = load_idx(&img, &lab, 10, Normalization::Unit8, FixedPointFormat::default()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.features[[0, 1]], 1.0);
        assert_eq!(d.features[[1, 0]], FixedPointFormat::default().quantize(128.0 / 255.0));
        assert_eq!(d.labels, vec![3, 9]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i");
        let lab = dir.path().join("l");
        fs::write(&img, idx_images(2, 1, 2, &[0, 255, 128])).unwrap();
        fs::write(&lab, idx_labels(&[3, 9])).unwrap();
        let f = FixedPointFormat::default();
        assert!(matches!(load_idx(&img, &lab, 10, Normalization::Unit8, f), Err(Error::Format(_))));
        fs::write(&img, idx_images(2, 1, 2, &[0, 255, 128, 4])).unwrap();
        fs::write(&lab, idx_labels(&[3])).unwrap();
        assert!(matches!(load_idx(&img, &lab, 10, Normalization::Unit8, f), Err(Error::Shape(_))));
        fs::write(&lab, idx_labels(&[3, 10])).unwrap();
        assert!(matches!(load_idx(&img, &lab, 10, Normalization::Unit8, f), Err(Error::Input(_))));
        let missing = dir.path().join("nope");
        let err = load_idx(&missing, &lab, 10, Normalization::Unit8, f).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn csv_with_header() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,label\n0.5,-1,1\n0.25,2,0\n").unwrap();
        let d = load_csv(f.path(), None, Normalization::Identity, FixedPointFormat::default()).unwrap();
        assert_eq!(d.classes, 2);
        assert_eq!(d.features.row(1).to_vec(), vec![0.25, 2.0]);
        assert_eq!(d.labels, vec![1, 0]);
    }

    #[test]
    fn csv_rejects_ragged_and_fractional() {
        let fmt = FixedPointFormat::default();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "0.5,-1,1\n0.25,0").unwrap();
        assert!(load_csv(f.path(), None, Normalization::Identity, fmt).is_err());
        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "0.5,-1,1.5").unwrap();
        assert!(load_csv(g.path(), None, Normalization::Identity, fmt).is_err());
    }
}
