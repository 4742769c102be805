use crate::error::{Axis, Error, Result};
use crate::eval::NLL_FLOOR;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Mean `−ln p[label]` over every position, with its gradient w.r.t. `probs`.
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = probs.shape();
    let plane = s.plane();
    let positions = s.n * plane;
    if labels.len() != positions {
        return Err(Error::dim("cross_entropy_loss", Axis::Length, positions, labels.len()));
    }
    let mut grad = Tensor::zeros(s);
    let mut total = 0.0;
    let scale = 1.0 / positions as f64;
    for n in 0..s.n {
        for p in 0..plane {
            let label = labels[n * plane + p];
            if label >= s.c {
                return Err(Error::Data(format!("label {label} out of range for {} classes", s.c)));
            }
            let idx = probs.index(n, label, p / s.w, p % s.w);
            let v = probs.data()[idx];
            // NaN must fall through to the first branch so it reaches the loss.
            if v >= NLL_FLOOR || v.is_nan() {
                total -= v.ln();
                grad.data_mut()[idx] = -scale / v;
            } else {
                total -= NLL_FLOOR.ln();
            }
        }
    }
    Ok((total * scale, grad))
}

/// Soft dice loss `1 − 2Σpg / (Σp + Σg)` on the foreground channel (1) of
/// 2-class maps, pooled over the batch; zero when both sums vanish.
pub fn dice_loss(probs: &Tensor, mask: &[u8]) -> Result<(f64, Tensor)> {
    let s = probs.shape();
    if s.c != 2 {
        return Err(Error::dim("dice_loss", Axis::Channel, 2, s.c));
    }
    let plane = s.plane();
    if mask.len() != s.n * plane {
        return Err(Error::dim("dice_loss", Axis::Length, s.n * plane, mask.len()));
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::Data("dice_loss mask values must be 0 or 1".into()));
    }
    let (mut inter, mut sum) = (0.0, 0.0);
    for n in 0..s.n {
        for (p, &g) in probs.plane(n, 1).iter().zip(&mask[n * plane..(n + 1) * plane]) {
            let g = g as f64;
            inter += p * g;
            sum += p + g;
        }
    }
    let mut grad = Tensor::zeros(s);
    if sum == 0.0 {
        return Ok((0.0, grad));
    }
    for n in 0..s.n {
        for p in 0..plane {
            let g = mask[n * plane + p] as f64;
            let idx = probs.index(n, 1, p / s.w, p % s.w);
            grad.data_mut()[idx] = -(2.0 * g * sum - 2.0 * inter) / (sum * sum);
        }
    }
    Ok((1.0 - 2.0 * inter / sum, grad))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Dice,
    /// Sum of both terms.
    CrossEntropyDice,
}

impl LossKind {
    /// `labels` holds one class per output position; dice terms read them as a 0/1 mask.
    pub fn evaluate(self, probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mask = || -> Result<Vec<u8>> {
            labels
                .iter()
                .map(|&l| u8::try_from(l).ok().filter(|&v| v <= 1).ok_or_else(|| Error::Data(format!("dice label {l} not 0/1"))))
                .collect()
        };
        match self {
            LossKind::CrossEntropy => cross_entropy_loss(probs, labels),
            LossKind::Dice => dice_loss(probs, &mask()?),
            LossKind::CrossEntropyDice => {
                let (a, mut ga) = cross_entropy_loss(probs, labels)?;
                let (b, gb) = dice_loss(probs, &mask()?)?;
                ga.data_mut().iter_mut().zip(gb.data()).for_each(|(x, y)| *x += y);
                Ok((a + b, ga))
            }
        }
    }
}
