//! Datasets and the on-disk formats they are read from.

mod cifar;
mod pnm;

pub use cifar::{encode_cifar10, load_cifar10, parse_cifar10, Cifar10Record, CIFAR10_PIXELS, CIFAR10_RECORD_LEN};
pub use pnm::{
    emit_uncertainty_map, encode_pnm, load_segmentation_pairs, parse_pnm, read_pnm, resize_nearest, uncertainty_map_bytes,
    write_pnm, PnmImage,
};

use crate::error::{Axis, Error, Result};
use crate::tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};

/// Per-example class labels, or per-pixel binary masks stored `N·H·W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Masks(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    targets: Targets,
}

impl Dataset {
    pub fn new(images: Tensor, targets: Targets) -> Result<Self> {
        let s = images.shape();
        match &targets {
            Targets::Classes(labels) if labels.len() != s.n => {
                return Err(Error::dim("Dataset::new", Axis::Batch, s.n, labels.len()));
            }
            Targets::Masks(masks) if masks.len() != s.n * s.plane() => {
                return Err(Error::dim("Dataset::new", Axis::Length, s.n * s.plane(), masks.len()));
            }
            Targets::Masks(masks) if masks.iter().any(|&m| m > 1) => {
                return Err(Error::Data("mask values must be 0 or 1".into()));
            }
            _ => {}
        }
        Ok(Dataset { images, targets })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.images.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self.targets, Targets::Masks(_))
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.select_batch(indices)?;
        let targets = match &self.targets {
            Targets::Classes(l) => Targets::Classes(indices.iter().map(|&i| l[i]).collect()),
            Targets::Masks(m) => {
                let plane = self.images.shape().plane();
                Targets::Masks(indices.iter().flat_map(|&i| m[i * plane..(i + 1) * plane].iter().copied()).collect())
            }
        };
        Ok(Dataset { images, targets })
    }

    /// One label per output position: the class per example, or the mask value per pixel.
    pub fn position_labels(&self) -> Vec<usize> {
        match &self.targets {
            Targets::Classes(l) => l.clone(),
            Targets::Masks(m) => m.iter().map(|&v| v as usize).collect(),
        }
    }

    pub fn with_images(&self, images: Tensor) -> Result<Dataset> {
        if images.shape() != self.images.shape() {
            return Err(Error::InvalidShape(format!(
                "replacement images {:?} differ from {:?}",
                images.shape().dims(),
                self.images.shape().dims()
            )));
        }
        Ok(Dataset { images, targets: self.targets.clone() })
    }
}

/// Per-channel input standardisation `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Population mean and standard deviation of each channel; a constant channel gets std 1.
    pub fn from_images(images: &Tensor) -> Self {
        let s = images.shape();
        let count = (s.n * s.plane()) as f64;
        let mut mean = vec![0.0; s.c];
        let mut std = vec![0.0; s.c];
        for c in 0..s.c {
            let sum: f64 = (0..s.n).flat_map(|n| images.plane(n, c)).sum();
            let m = sum / count;
            let ss: f64 = (0..s.n).flat_map(|n| images.plane(n, c)).map(|v| (v - m) * (v - m)).sum();
            let sd = (ss / count).sqrt();
            mean[c] = m;
            std[c] = if sd > 0.0 { sd } else { 1.0 };
        }
        Normalization { mean, std }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!("normalization needs {channels} mean and std values")));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("normalization std must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        self.validate(s.c)?;
        let mut out = images.clone();
        let plane = s.plane();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = i % s.c;
            let (m, sd) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
        Ok(out)
    }
}

/// Flat `u8` pixels (channel-planar per image) to `[0,1]` fp64.
pub(crate) fn bytes_to_unit(shape: Shape, bytes: &[u8]) -> Tensor {
    Tensor::from_parts(shape, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}
