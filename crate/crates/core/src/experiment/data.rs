//! Synthetic blobs, IDX ingestion and node partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::learning::{Dataset, Record};
use crate::privacy::GaussianSampler;
use crate::rng::stream_rng;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Fraction of generated records that go to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

/// `k` unit-variance Gaussian blobs in `p` dimensions. Blob `c` is centred
/// at `(separation/√2)·e_c`, so every pair of means is `separation` apart.
/// Labels are balanced; the shuffled records are split 80/20.
pub fn generate_synthetic(
    n_records: usize,
    p: usize,
    k: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if k < 2 || p < 2 {
        return Err(Error::config(format!("need K >= 2 and p >= 2, got K={k}, p={p}")));
    }
    if k > p {
        return Err(Error::config(format!("K={k} blobs need at least K features, got p={p}")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::config(format!("separation {separation} must be finite and >= 0")));
    }
    let n_train = (n_records as f64 * TRAIN_FRACTION).round() as usize;
    if n_train == 0 || n_train == n_records {
        return Err(Error::config(format!("{n_records} records cannot be split 80/20")));
    }
    let mut rng = stream_rng(seed, "synthetic", 0);
    let mut sampler = GaussianSampler::new();
    let offset = separation / std::f64::consts::SQRT_2;
    let mut records: Vec<Record> = (0..n_records)
        .map(|i| {
            let label = i % k;
            let mut features: Vec<f64> = (0..p).map(|_| sampler.sample(&mut rng)).collect();
            features[label] += offset;
            Record {
                features,
                label,
                target: label as f64,
            }
        })
        .collect();
    records.shuffle(&mut rng);
    let test = records.split_off(n_train);
    Ok((Dataset::new(records, p, k)?, Dataset::new(test, p, k)?))
}

fn ingest(offset: usize, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| ingest(bytes.len(), format!("truncated {what}")))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file; returns `(count, rows·cols, pixel bytes)`.
fn parse_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ingest(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "image header")? as usize;
    let rows = be_u32(bytes, 8, "image header")? as usize;
    let cols = be_u32(bytes, 12, "image header")? as usize;
    let pixels = rows * cols;
    if pixels == 0 {
        return Err(ingest(8, "image dimensions must be positive"));
    }
    let need = 16 + count * pixels;
    if bytes.len() < need {
        return Err(ingest(bytes.len(), format!("image data truncated: {} of {need} bytes", bytes.len())));
    }
    if bytes.len() > need {
        return Err(ingest(need, "trailing bytes after image data"));
    }
    Ok((count, pixels, &bytes[16..]))
}

fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(ingest(0, format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "label header")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(ingest(bytes.len(), format!("label data truncated: {} of {need} bytes", bytes.len())));
    }
    if bytes.len() > need {
        return Err(ingest(need, "trailing bytes after label data"));
    }
    Ok(&bytes[8..])
}

/// Loads an IDX image/label pair as a 10-class dataset with pixels scaled
/// to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read(images_path)?;
    let label_bytes = read(labels_path)?;
    let (count, pixels, data) = parse_images(&image_bytes)?;
    let labels = parse_labels(&label_bytes)?;
    if labels.len() != count {
        return Err(ingest(4, format!("{} labels for {count} images", labels.len())));
    }
    if count == 0 {
        return Err(ingest(4, "no records"));
    }
    let mut records = Vec::with_capacity(count);
    for (i, (row, &label)) in data.chunks_exact(pixels).zip(labels).enumerate() {
        if label > 9 {
            return Err(ingest(8 + i, format!("label {label} outside 0..=9")));
        }
        records.push(Record {
            features: row.iter().map(|&b| f64::from(b) / 255.0).collect(),
            label: label as usize,
            target: f64::from(label),
        });
    }
    Dataset::new(records, pixels, 10)
}

/// Writes an IDX image/label pair; `images` are row-major `rows×cols` bytes.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
    labels: &[u8],
) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::invalid("image and label counts differ"));
    }
    if let Some(i) = images.iter().position(|img| img.len() != rows * cols) {
        return Err(Error::invalid(format!("image {i} is not {rows}x{cols}")));
    }
    let count = images.len() as u32;
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend(count.to_be_bytes());
    out.extend((rows as u32).to_be_bytes());
    out.extend((cols as u32).to_be_bytes());
    images.iter().for_each(|img| out.extend(img));
    fs::write(images_path, out).map_err(|e| Error::io(images_path, e))?;

    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend(count.to_be_bytes());
    out.extend(labels);
    fs::write(labels_path, out).map_err(|e| Error::io(labels_path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    /// Shuffled split.
    Iid,
    /// Records sorted by label, then split contiguously.
    ByLabel,
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(PartitionMode::Iid),
            "by-label" => Ok(PartitionMode::ByLabel),
            other => Err(Error::config(format!("unknown partition mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PartitionMode::Iid => "iid",
            PartitionMode::ByLabel => "by-label",
        })
    }
}

/// Splits `data` into `n` disjoint parts whose sizes differ by at most one.
pub fn partition_dataset(data: &Dataset, n: usize, mode: PartitionMode, seed: u64) -> Result<Vec<Dataset>> {
    if n == 0 || n > data.len() {
        return Err(Error::config(format!("cannot split {} records into {n} parts", data.len())));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    match mode {
        PartitionMode::Iid => order.shuffle(&mut stream_rng(seed, "partition", 0)),
        PartitionMode::ByLabel => order.sort_by_key(|&i| data.record(i).label),
    }
    let base = data.len() / n;
    let extra = data.len() % n;
    let mut parts = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        parts.push(data.subset(&order[start..start + len])?);
        start += len;
    }
    Ok(parts)
}
