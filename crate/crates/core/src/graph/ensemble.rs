use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Shape, Tensor};

/// Mean probabilities, entropy of the mean, and per-class sample variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mean_probs: Tensor,
    /// N×1×H×W map of `-Σ p̄ ln p̄` over classes.
    pub predictive_entropy: Tensor,
    /// Unbiased across samples (zero for a single sample).
    pub per_class_variance: Tensor,
}

/// Arithmetic mean over samples of probability tensors (classes on the channel axis).
pub fn aggregate(per_sample_probs: &[Tensor]) -> Result<Aggregate> {
    let first = per_sample_probs
        .first()
        .ok_or_else(|| Error::InvalidShape("aggregate needs at least one sample".into()))?;
    let shape = first.shape();
    for t in &per_sample_probs[1..] {
        check_same_shape("aggregate", shape, t.shape())?;
    }
    let m = per_sample_probs.len() as f64;
    let len = shape.len();
    let mut mean = vec![0.0; len];
    for t in per_sample_probs {
        mean.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|v| *v /= m);
    // Shifted by the first sample so identical samples give exactly zero.
    let mut var = vec![0.0; len];
    if per_sample_probs.len() > 1 {
        let mut shift_sum = vec![0.0; len];
        for t in per_sample_probs {
            for (i, (x, x0)) in t.data().iter().zip(first.data()).enumerate() {
                let d = x - x0;
                shift_sum[i] += d;
                var[i] += d * d;
            }
        }
        for (v, s) in var.iter_mut().zip(&shift_sum) {
            let unbiased = (*v - s * s / m) / (m - 1.0);
            *v = if unbiased < 0.0 { 0.0 } else { unbiased };
        }
    }
    let mean = Tensor::from_parts(shape, mean);
    let entropy = entropy_map(&mean);
    Ok(Aggregate {
        mean_probs: mean,
        predictive_entropy: entropy,
        per_class_variance: Tensor::from_parts(shape, var),
    })
}

/// Entropy over the channel axis at every position, with `0 ln 0 = 0`.
pub fn entropy_map(probs: &Tensor) -> Tensor {
    let s = probs.shape();
    let plane = s.plane();
    let mut out = vec![0.0; s.n * plane];
    for n in 0..s.n {
        for c in 0..s.c {
            for (o, &p) in out[n * plane..(n + 1) * plane].iter_mut().zip(probs.plane(n, c)) {
                if p > 0.0 || p.is_nan() {
                    *o -= p * p.ln();
                }
            }
        }
    }
    // Rounding can leave -0.0 or a few ulps below zero for one-hot rows.
    out.iter_mut().filter(|v| **v <= 0.0).for_each(|v| *v = 0.0);
    Tensor::from_parts(Shape::new(s.n, 1, s.h, s.w), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub per_sample_probs: Vec<Tensor>,
    pub mean_probs: Tensor,
    pub predictive_entropy: Tensor,
    pub per_class_variance: Tensor,
}

impl EnsembleOutput {
    pub fn from_samples(per_sample_probs: Vec<Tensor>) -> Result<Self> {
        let agg = aggregate(&per_sample_probs)?;
        Ok(EnsembleOutput {
            per_sample_probs,
            mean_probs: agg.mean_probs,
            predictive_entropy: agg.predictive_entropy,
            per_class_variance: agg.per_class_variance,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.per_sample_probs.len()
    }

    /// Largest elementwise difference across all per-sample and aggregate tensors.
    pub fn max_abs_diff(&self, other: &EnsembleOutput) -> f64 {
        assert_eq!(self.num_samples(), other.num_samples(), "sample counts differ");
        self.per_sample_probs
            .iter()
            .zip(&other.per_sample_probs)
            .map(|(a, b)| a.max_abs_diff(b))
            .chain([
                self.mean_probs.max_abs_diff(&other.mean_probs),
                self.predictive_entropy.max_abs_diff(&other.predictive_entropy),
                self.per_class_variance.max_abs_diff(&other.per_class_variance),
            ])
            .fold(0.0, crate::tensor::nan_max)
    }
}
