use super::corrupt::CorruptionSpec;
use super::metrics::{accuracy, dice, ece, foreground_mask, mean_entropy, nll, pixelwise_ece};
use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const CSV_COLUMNS: [&str; 9] = ["condition", "kind", "level", "accuracy", "ece", "nll", "entropy", "dice", "pixelwise_ece"];

/// Metrics of one evaluation condition. `kind` is `"clean"` (level 0) or a corruption name.
/// Segmentation reports carry pixel accuracy and per-pixel ECE/NLL plus `dice`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationReport {
    pub condition: String,
    pub kind: String,
    pub level: u8,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub entropy: f64,
    pub dice: Option<f64>,
    pub pixelwise_ece: Option<f64>,
}

pub fn csv_header() -> String {
    CSV_COLUMNS.join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CalibrationReport {
    /// Computes the report for mean predictive probabilities on `dataset`.
    pub fn from_probs(
        condition: impl Into<String>,
        corruption: Option<CorruptionSpec>,
        probs: &Tensor,
        dataset: &Dataset,
        num_bins: usize,
    ) -> Result<Self> {
        let labels = dataset.position_labels();
        let (dice_score, pix_ece) = match dataset.targets() {
            Targets::Classes(_) => (None, None),
            Targets::Masks(masks) => (Some(dice(&foreground_mask(probs), masks)?), Some(pixelwise_ece(probs, masks, num_bins)?)),
        };
        let report = CalibrationReport {
            condition: condition.into(),
            kind: corruption.map_or_else(|| "clean".to_string(), |c| c.kind.name().to_string()),
            level: corruption.map_or(0, |c| c.level),
            accuracy: accuracy(probs, &labels)?,
            ece: ece(probs, &labels, num_bins)?,
            nll: nll(probs, &labels)?,
            entropy: mean_entropy(probs),
            dice: dice_score,
            pixelwise_ece: pix_ece,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let values = [Some(self.accuracy), Some(self.ece), Some(self.nll), Some(self.entropy), self.dice, self.pixelwise_ece];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("metrics of condition '{}'", self.condition)));
        }
        if !(0.0..=1.0).contains(&self.accuracy) || self.dice.is_some_and(|d| !(0.0..=1.0).contains(&d)) {
            return Err(Error::NonFinite(format!("metric out of [0,1] in condition '{}'", self.condition)));
        }
        Ok(())
    }

    /// Row in [`CSV_COLUMNS`] order; absent segmentation metrics are empty fields.
    pub fn to_csv_row(&self) -> String {
        [
            self.condition.clone(),
            self.kind.clone(),
            self.level.to_string(),
            self.accuracy.to_string(),
            self.ece.to_string(),
            self.nll.to_string(),
            self.entropy.to_string(),
            opt(self.dice),
            opt(self.pixelwise_ece),
        ]
        .join(",")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }

    /// Inverse of [`CalibrationReport::to_csv_row`].
    pub fn from_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != CSV_COLUMNS.len() {
            return Err(Error::Data(format!("CSV row has {} fields, expected {}", f.len(), CSV_COLUMNS.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Data(format!("bad number '{s}' in CSV row")));
        let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(CalibrationReport {
            condition: f[0].to_string(),
            kind: f[1].to_string(),
            level: f[2].parse().map_err(|_| Error::Data(format!("bad level '{}'", f[2])))?,
            accuracy: num(f[3])?,
            ece: num(f[4])?,
            nll: num(f[5])?,
            entropy: num(f[6])?,
            dice: opt_num(f[7])?,
            pixelwise_ece: opt_num(f[8])?,
        })
    }
}
