use super::{bytes_to_unit, Dataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Shape;
use std::path::Path;

pub const CIFAR10_PIXELS: usize = 3 * 32 * 32;
/// One label byte followed by the red, green and blue 32×32 planes.
pub const CIFAR10_RECORD_LEN: usize = 1 + CIFAR10_PIXELS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cifar10Record {
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Decodes concatenated records; pixels land in `[0,1]` without normalisation.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Data("CIFAR-10 file is empty".into()));
    }
    if bytes.len() % CIFAR10_RECORD_LEN != 0 {
        return Err(Error::Data(format!(
            "CIFAR-10 file truncated: {} bytes is not a multiple of {CIFAR10_RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR10_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_LEN).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("CIFAR-10 record {i}: label byte {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::new(bytes_to_unit(Shape::new(n, 3, 32, 32), &pixels), Targets::Classes(labels))
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_cifar10(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn encode_cifar10(records: &[Cifar10Record]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * CIFAR10_RECORD_LEN);
    for r in records {
        if r.pixels.len() != CIFAR10_PIXELS || r.label > 9 {
            return Err(Error::Data("CIFAR-10 record needs a label <= 9 and 3072 pixels".into()));
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    Ok(out)
}
