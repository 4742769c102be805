//! Calibration and segmentation metrics, image corruptions, and batched prediction.

mod corrupt;
mod metrics;
mod report;

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use metrics::{
    accuracy, bin_index, dice, ece, foreground_mask, mean_entropy, nll, pixelwise_ece, predictions, CalibrationBins,
    DEFAULT_BINS, NLL_FLOOR,
};
pub use report::{csv_header, CalibrationReport, CSV_COLUMNS};

use crate::error::{Error, Result};
use crate::graph::{run_branched_with_stats, run_deep_ensemble, run_mcdo, run_vanilla, BranchedModel, ModelGraph};
use crate::stochastic::MaskSeed;
use crate::tensor::Tensor;

/// How predictive probabilities are produced.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Vanilla(&'a ModelGraph),
    Mcdo { graph: &'a ModelGraph, samples: usize, seed: u64 },
    Branched { model: &'a BranchedModel, seed: u64, fused: bool },
    DeepEnsemble(&'a [ModelGraph]),
}

impl Predictor<'_> {
    /// Mean probabilities over the whole batch `images`.
    pub fn predict_batch(&self, images: &Tensor) -> Result<Tensor> {
        Ok(match *self {
            Predictor::Vanilla(g) => run_vanilla(g, images)?,
            Predictor::Mcdo { graph, samples, seed } => run_mcdo(graph, images, samples, seed)?.mean_probs,
            Predictor::Branched { model, seed, fused } => run_branched_with_stats(model, images, seed, fused)?.0.mean_probs,
            Predictor::DeepEnsemble(members) => run_deep_ensemble(members, images)?.mean_probs,
        })
    }

    fn reseeded(&self, chunk: usize) -> Self {
        match *self {
            Predictor::Mcdo { graph, samples, seed } => {
                Predictor::Mcdo { graph, samples, seed: MaskSeed::new(seed, chunk, 0).stream_key() }
            }
            Predictor::Branched { model, seed, fused } => {
                Predictor::Branched { model, seed: MaskSeed::new(seed, chunk, 0).stream_key(), fused }
            }
            other => other,
        }
    }

    /// Mean probabilities for `images`, evaluated `batch_size` at a time.
    ///
    /// Each chunk gets its own mask seed derived from the base seed and the
    /// chunk index, so results depend on `batch_size` but not on anything else.
    pub fn predict(&self, images: &Tensor, batch_size: usize) -> Result<Tensor> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let n = images.shape().n;
        let mut parts = Vec::with_capacity(n.div_ceil(batch_size));
        for (chunk, start) in (0..n).step_by(batch_size).enumerate() {
            let x = images.slice_batch(start, (start + batch_size).min(n))?;
            parts.push(self.reseeded(chunk).predict_batch(&x)?);
        }
        Tensor::concat_batch(&parts)
    }
}
