use crate::error::{Axis, Error, Result};
use crate::graph::entropy_map;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 15;

/// Bin of a confidence: bin `b` covers `(b/B, (b+1)/B]`, and anything ≤ 1/B lands in bin 0.
pub fn bin_index(confidence: f64, num_bins: usize) -> usize {
    let bf = num_bins as f64;
    let mut b = ((confidence * bf).ceil() as usize).saturating_sub(1).min(num_bins - 1);
    // Correct for rounding in the product so the edges follow the division exactly.
    while b > 0 && confidence <= b as f64 / bf {
        b -= 1;
    }
    while b + 1 < num_bins && confidence > (b + 1) as f64 / bf {
        b += 1;
    }
    b
}

/// Top-label reliability accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBins {
    pub counts: Vec<u64>,
    pub confidence_sums: Vec<f64>,
    pub correct_counts: Vec<u64>,
}

impl CalibrationBins {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::Config("number of calibration bins must be >= 1".into()));
        }
        Ok(CalibrationBins {
            counts: vec![0; num_bins],
            confidence_sums: vec![0.0; num_bins],
            correct_counts: vec![0; num_bins],
        })
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, confidence: f64, correct: bool) {
        let b = bin_index(confidence, self.num_bins());
        self.counts[b] += 1;
        self.confidence_sums[b] += confidence;
        self.correct_counts[b] += u64::from(correct);
    }

    /// Adds every position of `probs` (classes on the channel axis) against `labels`.
    pub fn add_predictions(&mut self, probs: &Tensor, labels: &[usize]) -> Result<()> {
        for (conf, pred, label) in top_label(probs, labels)? {
            self.add(conf, pred == label);
        }
        Ok(())
    }

    /// `Σ_b (n_b/N)·|acc_b − conf_b|`.
    pub fn ece(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::Data("ece of an empty prediction set".into()));
        }
        let n = n as f64;
        let mut total = 0.0;
        for b in 0..self.num_bins() {
            let nb = self.counts[b];
            if nb == 0 {
                continue;
            }
            let acc = self.correct_counts[b] as f64 / nb as f64;
            let conf = self.confidence_sums[b] / nb as f64;
            total += nb as f64 / n * (acc - conf).abs();
        }
        Ok(total)
    }
}

/// `(confidence, argmax, label)` per position; ties resolve to the lowest class index.
fn top_label(probs: &Tensor, labels: &[usize]) -> Result<Vec<(f64, usize, usize)>> {
    let s = probs.shape();
    let positions = s.n * s.plane();
    if labels.len() != positions {
        return Err(Error::dim("metrics", Axis::Length, positions, labels.len()));
    }
    let mut out = Vec::with_capacity(positions);
    for n in 0..s.n {
        for p in 0..s.plane() {
            let label = labels[n * s.plane() + p];
            if label >= s.c {
                return Err(Error::Data(format!("label {label} out of range for {} classes", s.c)));
            }
            let (mut best, mut conf) = (0, probs.plane(n, 0)[p]);
            for c in 1..s.c {
                let v = probs.plane(n, c)[p];
                if v > conf {
                    best = c;
                    conf = v;
                }
            }
            out.push((conf, best, label));
        }
    }
    Ok(out)
}

/// Argmax class per position (lowest index on ties).
pub fn predictions(probs: &Tensor) -> Vec<usize> {
    let s = probs.shape();
    let dummy = vec![0; s.n * s.plane()];
    top_label(probs, &dummy).expect("label 0 is always valid").into_iter().map(|(_, p, _)| p).collect()
}

/// Expected calibration error over every position of `probs`.
pub fn ece(probs: &Tensor, labels: &[usize], num_bins: usize) -> Result<f64> {
    let mut bins = CalibrationBins::new(num_bins)?;
    bins.add_predictions(probs, labels)?;
    bins.ece()
}

/// [`ece`] with each pixel of `N×K×H×W` maps as one sample against `N·H·W` masks.
pub fn pixelwise_ece(prob_maps: &Tensor, masks: &[u8], num_bins: usize) -> Result<f64> {
    let labels: Vec<usize> = masks.iter().map(|&m| m as usize).collect();
    ece(prob_maps, &labels, num_bins)
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let rows = top_label(probs, labels)?;
    if rows.is_empty() {
        return Err(Error::Data("accuracy of an empty prediction set".into()));
    }
    Ok(rows.iter().filter(|(_, p, l)| p == l).count() as f64 / rows.len() as f64)
}

pub const NLL_FLOOR: f64 = 1e-12;

/// Mean `−ln p[label]` with probabilities clamped at [`NLL_FLOOR`].
pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = probs.shape();
    let positions = s.n * s.plane();
    if labels.len() != positions {
        return Err(Error::dim("nll", Axis::Length, positions, labels.len()));
    }
    let mut total = 0.0;
    for n in 0..s.n {
        for p in 0..s.plane() {
            let label = labels[n * s.plane() + p];
            if label >= s.c {
                return Err(Error::Data(format!("label {label} out of range for {} classes", s.c)));
            }
            let v = probs.plane(n, label)[p];
            total -= if v < NLL_FLOOR { NLL_FLOOR } else { v }.ln();
        }
    }
    Ok(total / positions as f64)
}

/// `2|A∩B| / (|A|+|B|)` of binary masks; two empty masks score 1.
pub fn dice(pred_mask: &[u8], true_mask: &[u8]) -> Result<f64> {
    if pred_mask.len() != true_mask.len() {
        return Err(Error::dim("dice", Axis::Length, true_mask.len(), pred_mask.len()));
    }
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred_mask.iter().zip(true_mask) {
        let (p, t) = (p != 0, t != 0);
        a += u64::from(p);
        b += u64::from(t);
        inter += u64::from(p && t);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Foreground mask (class 1 wins the argmax) of 2-class probability maps.
pub fn foreground_mask(prob_maps: &Tensor) -> Vec<u8> {
    predictions(prob_maps).into_iter().map(|c| u8::from(c == 1)).collect()
}

/// Mean entropy of the predictive distribution over all positions.
pub fn mean_entropy(probs: &Tensor) -> f64 {
    let e = entropy_map(probs);
    e.data().iter().sum::<f64>() / e.data().len() as f64
}
