//! Experiment configuration: one JSON document, unknown keys rejected.

use serde::{Deserialize, Serialize};
use smcdo::bench::BenchConfig;
use smcdo::data::Normalization;
use smcdo::eval::{CorruptionKind, CorruptionSpec, DEFAULT_BINS};
use smcdo::graph::ExecutorKind;
use smcdo::stochastic::{check_rate, DropoutMode, DropoutSpec};
use smcdo::train::{ArchConfig, ArchFamily, TrainConfig};
use smcdo::{Error, Result};
use std::path::{Path, PathBuf};

fn default_members() -> usize {
    1
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

fn default_eval_batch() -> usize {
    100
}

fn default_maps() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_image_size() -> usize {
    64
}

fn default_bench_batch() -> usize {
    1
}

fn default_mode() -> DropoutMode {
    DropoutMode::Spatial
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    #[serde(default = "default_mode")]
    pub dropout_mode: DropoutMode,
    pub train: TrainConfig,
    /// Independently initialised and trained members (deep-ensemble baseline when > 1).
    #[serde(default = "default_members")]
    pub ensemble_members: usize,
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub bench: Option<BenchSection>,
    pub data: DataConfig,
    /// Relative to the config file.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McdoExecutor {
    McdoSequential,
    #[default]
    McdoBranched,
    McdoBranchedFused,
}

impl McdoExecutor {
    pub fn kind(self) -> ExecutorKind {
        match self {
            McdoExecutor::McdoSequential => ExecutorKind::McdoSequential,
            McdoExecutor::McdoBranched => ExecutorKind::McdoBranched,
            McdoExecutor::McdoBranchedFused => ExecutorKind::McdoBranchedFused,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionGrid {
    pub kinds: Vec<CorruptionKind>,
    pub levels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Monte Carlo samples per prediction.
    pub m: usize,
    pub rate_inf: Vec<f64>,
    #[serde(default)]
    pub corruptions: CorruptionGrid,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub executor: McdoExecutor,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub include_vanilla: bool,
    /// Evaluate the uncorrupted test set as well as the corruption grid.
    #[serde(default = "default_true")]
    pub include_clean: bool,
    /// Uncertainty maps written per segmentation evaluation.
    #[serde(default = "default_maps")]
    pub maps: usize,
    /// Seed for corruption noise and inference masks.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// One checkpoint is trained (or reused) per rate.
    pub rate_train: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub executors: Vec<ExecutorKind>,
    #[serde(default = "default_bench_batch")]
    pub batch: usize,
    /// Defaults to `eval.m`.
    #[serde(default)]
    pub m: Option<usize>,
}

impl BenchSection {
    pub fn harness(&self) -> BenchConfig {
        BenchConfig { warmup_iters: self.warmup_iters, timed_iters: self.timed_iters, executors: self.executors.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// CIFAR-10 binary batch files.
    Cifar10,
    /// A directory of `<stem>.ppm` images with `<stem>.pgm` masks.
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    /// CIFAR-10 classes to keep, relabelled `0..len` in this order.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    #[serde(default)]
    pub max_train: Option<usize>,
    #[serde(default)]
    pub max_test: Option<usize>,
    /// Square side length segmentation pairs are resized to.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Defaults to per-channel statistics of the training images.
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

impl ExperimentConfig {
    /// Parses and validates; relative paths are resolved against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        cfg.data.train.iter_mut().for_each(resolve);
        cfg.data.test.iter_mut().for_each(resolve);
        resolve(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.ensemble_members == 0 {
            return Err(Error::Config("ensemble_members must be >= 1".into()));
        }
        let e = &self.eval;
        if e.m == 0 || e.bins == 0 || e.batch_size == 0 {
            return Err(Error::Config("eval.m, eval.bins and eval.batch_size must be >= 1".into()));
        }
        if e.rate_inf.is_empty() {
            return Err(Error::Config("eval.rate_inf must be nonempty".into()));
        }
        for &r in &e.rate_inf {
            check_rate(r).map_err(|err| Error::Config(err.to_string()))?;
        }
        if e.corruptions.kinds.is_empty() != e.corruptions.levels.is_empty() {
            return Err(Error::Config("eval.corruptions needs both kinds and levels, or neither".into()));
        }
        if !e.include_clean && e.corruptions.kinds.is_empty() {
            return Err(Error::Config("no evaluation conditions: enable include_clean or add corruptions".into()));
        }
        for &l in &e.corruptions.levels {
            CorruptionSpec::new(CorruptionKind::Contrast, l)?;
        }
        if let Some(s) = &self.sweep {
            if s.rate_train.is_empty() {
                return Err(Error::Config("sweep.rate_train must be nonempty".into()));
            }
            for &r in &s.rate_train {
                check_rate(r).map_err(|err| Error::Config(err.to_string()))?;
            }
        }
        if let Some(b) = &self.bench {
            b.harness().validate()?;
            if b.batch == 0 || b.m == Some(0) {
                return Err(Error::Config("bench.batch and bench.m must be >= 1".into()));
            }
        }
        let d = &self.data;
        if d.train.is_empty() || d.test.is_empty() {
            return Err(Error::Config("data.train and data.test must be nonempty".into()));
        }
        for p in d.train.iter().chain(&d.test) {
            if !p.exists() {
                return Err(Error::Config(format!("data path {} does not exist", p.display())));
            }
        }
        match d.kind {
            DataKind::Cifar10 => {
                if self.arch.family != ArchFamily::MiniWrn || self.arch.in_channels != 3 {
                    return Err(Error::Config("cifar10 data needs a 3-channel mini_wrn".into()));
                }
                let classes = d.classes.as_ref().map_or(10, Vec::len);
                if let Some(c) = &d.classes {
                    let mut sorted = c.clone();
                    sorted.sort_unstable();
                    sorted.dedup();
                    if sorted.len() != c.len() || c.iter().any(|&v| v > 9) {
                        return Err(Error::Config("data.classes must be distinct CIFAR-10 labels 0..9".into()));
                    }
                }
                if classes != self.arch.num_classes {
                    return Err(Error::Config(format!("arch.num_classes {} != {classes} data classes", self.arch.num_classes)));
                }
            }
            DataKind::Segmentation => {
                if self.arch.family != ArchFamily::MiniSegnet || self.arch.num_classes != 2 || self.arch.in_channels != 3 {
                    return Err(Error::Config("segmentation data needs a 3-channel, 2-class mini_segnet".into()));
                }
                if d.train.len() != 1 || d.test.len() != 1 || d.classes.is_some() {
                    return Err(Error::Config("segmentation data takes one train and one test directory".into()));
                }
                if d.image_size == 0 || d.image_size % self.arch.spatial_divisor() != 0 {
                    return Err(Error::Config(format!(
                        "data.image_size must be a positive multiple of {}",
                        self.arch.spatial_divisor()
                    )));
                }
            }
        }
        if let Some(n) = &d.normalization {
            n.validate(self.arch.in_channels)?;
        }
        Ok(())
    }

    /// Dropout spec used for training and for an inference rate.
    pub fn dropout(&self, rate_train: f64, rate_inf: f64) -> Result<DropoutSpec> {
        let spec = DropoutSpec { mode: self.dropout_mode, rate_train, rate_inf, scaling: Default::default() };
        spec.validate()?;
        Ok(spec)
    }

    /// Clean condition first (when enabled), then kinds × levels in config order.
    pub fn conditions(&self) -> Vec<Option<CorruptionSpec>> {
        let grid = &self.eval.corruptions;
        let mut out = if self.eval.include_clean { vec![None] } else { Vec::new() };
        for &kind in &grid.kinds {
            for &level in &grid.levels {
                out.push(Some(CorruptionSpec { kind, level }));
            }
        }
        out
    }
}
