//! Flat little-endian weight files.
//!
//! Layout: magic `SMCDO1`, `u32` record count, then per record a `u8` kind tag,
//! a `u32` count of shape ints, the shape ints (`u32`), and the fp64 payload.
//!
//! | tag | kind       | shape ints                          | payload                                 |
//! |-----|------------|-------------------------------------|-----------------------------------------|
//! | 1   | conv       | out, in, kh, kw, stride, padding    | weights (out·in·kh·kw), bias (out)      |
//! | 2   | batch-norm | channels                            | gamma, beta, running mean, var, epsilon |
//! | 3   | dense      | out, in                             | weights (out·in), bias (out)            |

use super::{BatchNormParams, ConvParams, DenseParams};
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 6] = b"SMCDO1";

const TAG_CONV: u8 = 1;
const TAG_BATCHNORM: u8 = 2;
const TAG_DENSE: u8 = 3;

/// Parameters of one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Conv(ConvParams),
    BatchNorm(BatchNormParams),
    Dense(DenseParams),
}

impl LayerWeights {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerWeights::Conv(_) => "conv",
            LayerWeights::BatchNorm(_) => "batchnorm",
            LayerWeights::Dense(_) => "dense",
        }
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        match self {
            LayerWeights::Conv(p) => p.weights.len() + p.bias.len(),
            LayerWeights::BatchNorm(p) => 2 * p.channels(),
            LayerWeights::Dense(p) => p.weights.len() + p.bias.len(),
        }
    }

    /// True when both records have identical kind and shape.
    pub fn same_layout(&self, other: &LayerWeights) -> bool {
        match (self, other) {
            (LayerWeights::Conv(a), LayerWeights::Conv(b)) => {
                a.dims() == b.dims() && a.stride == b.stride && a.padding == b.padding
            }
            (LayerWeights::BatchNorm(a), LayerWeights::BatchNorm(b)) => a.channels() == b.channels(),
            (LayerWeights::Dense(a), LayerWeights::Dense(b)) => {
                a.out_features == b.out_features && a.in_features == b.in_features
            }
            _ => false,
        }
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::WeightFormat(format!("dimension {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_weights(w: &mut impl Write, records: &[LayerWeights]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, records.len())?;
    for rec in records {
        let (tag, dims, payload): (u8, Vec<usize>, Vec<&[f64]>) = match rec {
            LayerWeights::Conv(p) => (
                TAG_CONV,
                vec![p.out_channels, p.in_channels, p.kernel_h, p.kernel_w, p.stride, p.padding],
                vec![&p.weights, &p.bias],
            ),
            LayerWeights::BatchNorm(p) => (
                TAG_BATCHNORM,
                vec![p.channels()],
                vec![&p.gamma, &p.beta, &p.running_mean, &p.running_var, std::slice::from_ref(&p.epsilon)],
            ),
            LayerWeights::Dense(p) => (TAG_DENSE, vec![p.out_features, p.in_features], vec![&p.weights, &p.bias]),
        };
        w.write_all(&[tag])?;
        write_u32(w, dims.len())?;
        for d in dims {
            write_u32(w, d)?;
        }
        for part in payload {
            write_f64s(w, part)?;
        }
    }
    Ok(())
}

pub fn to_bytes(records: &[LayerWeights]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_weights(&mut buf, records).expect("writing to a Vec cannot fail");
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::WeightFormat(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::WeightFormat("payload too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<LayerWeights>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let count = cur.u32()?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let tag = cur.u8()?;
        let ndims = cur.u32()?;
        let dims = (0..ndims).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let expect_dims = |n: usize| -> Result<()> {
            if dims.len() != n {
                return Err(Error::WeightFormat(format!("record {i}: expected {n} shape ints, found {}", dims.len())));
            }
            Ok(())
        };
        let rec = match tag {
            TAG_CONV => {
                expect_dims(6)?;
                let len = dims[0] * dims[1] * dims[2] * dims[3];
                let weights = cur.f64s(len)?;
                let bias = cur.f64s(dims[0])?;
                LayerWeights::Conv(ConvParams::new([dims[0], dims[1], dims[2], dims[3]], weights, bias, dims[4], dims[5])?)
            }
            TAG_BATCHNORM => {
                expect_dims(1)?;
                let c = dims[0];
                let p = BatchNormParams {
                    gamma: cur.f64s(c)?,
                    beta: cur.f64s(c)?,
                    running_mean: cur.f64s(c)?,
                    running_var: cur.f64s(c)?,
                    epsilon: cur.f64s(1)?[0],
                };
                p.validate()?;
                LayerWeights::BatchNorm(p)
            }
            TAG_DENSE => {
                expect_dims(2)?;
                let weights = cur.f64s(dims[0] * dims[1])?;
                let bias = cur.f64s(dims[0])?;
                LayerWeights::Dense(DenseParams::new(dims[0], dims[1], weights, bias)?)
            }
            other => return Err(Error::WeightFormat(format!("record {i}: unknown kind tag {other}"))),
        };
        records.push(rec);
    }
    if cur.pos != bytes.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(records)
}

pub fn read_weights(r: &mut impl Read) -> Result<Vec<LayerWeights>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
