//! Desk-scale training: architectures, losses, optimisers, augmentation and the epoch loop.

pub mod arch;
mod augment;
mod loss;
mod optim;

pub use arch::{build, build_mini_segnet, build_mini_wrn, ArchConfig, ArchFamily, BN_EPSILON};
pub use augment::{apply_draw, augment, augment_with_masks, AugmentConfig, AugmentDraw};
pub use loss::{cross_entropy_loss, dice_loss, LossKind};
pub use optim::{Optimizer, OptimizerKind};

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::eval::{accuracy, predictions, Predictor};
use crate::graph::ModelGraph;
use crate::stochastic::{check_rate, MaskSeed};
use crate::tensor::serialize::LayerWeights;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Piecewise-constant schedule with milestones at epochs 1, 80, 120, 160 and 180.
pub const REFERENCE_LR_MILESTONES: [(usize, f64); 5] = [(1, 0.1), (80, 0.01), (120, 0.001), (160, 0.0001), (180, 0.0005)];

// RNG stream ids under the training seed.
const STREAM_SHUFFLE: usize = 1;
const STREAM_AUGMENT: usize = 2;
const STREAM_DROPOUT: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `(epoch, learning_rate)` pairs; the rate holds from its epoch until the next milestone.
    pub lr_milestones: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub augmentation: AugmentConfig,
    pub rate_train: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        match self.lr_milestones.first() {
            Some((1, _)) => {}
            _ => return Err(Error::Config("lr_milestones must start at epoch 1".into())),
        }
        if self.lr_milestones.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("lr_milestones must be strictly increasing in epoch".into()));
        }
        if self.lr_milestones.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        check_rate(self.rate_train).map_err(|e| Error::Config(e.to_string()))?;
        Optimizer::new(self.optimizer, self.momentum, self.weight_decay)?;
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(&self.lr_milestones, epoch)
    }
}

/// Rate of the last milestone at or before `epoch` (the first rate before epoch 1).
pub fn lr_at(milestones: &[(usize, f64)], epoch: usize) -> f64 {
    milestones
        .iter()
        .take_while(|(e, _)| *e <= epoch)
        .last()
        .or(milestones.first())
        .map(|&(_, lr)| lr)
        .expect("validated milestones are nonempty")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    /// Computed from the dropout-active training forward passes.
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Vec<LayerWeights>,
    pub history: TrainHistory,
}

/// Trains `graph` in place (its shared weight store is updated) and returns a
/// snapshot of the final weights.
///
/// Example order, augmentation and dropout masks come from independent
/// streams of `config.seed`; two runs with equal inputs are bit-identical.
pub fn train(graph: &ModelGraph, train_set: &Dataset, validation: Option<&Dataset>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    graph.infer_shapes(train_set.images().shape())?;
    let mut optimizer = Optimizer::new(config.optimizer, config.momentum, config.weight_decay)?;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut MaskSeed::new(config.seed, STREAM_SHUFFLE, epoch).rng());
        let mut aug_rng = MaskSeed::new(config.seed, STREAM_AUGMENT, epoch).rng();
        let (mut loss_sum, mut correct, mut positions) = (0.0, 0usize, 0usize);
        for (batch_index, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = train_set.subset(idx)?;
            let (images, labels) = match batch.targets() {
                Targets::Classes(l) => (augment(batch.images(), &config.augmentation, &mut aug_rng), l.clone()),
                Targets::Masks(m) => {
                    let (x, m) = augment_with_masks(batch.images(), m, &config.augmentation, &mut aug_rng);
                    (x, m.into_iter().map(usize::from).collect())
                }
            };
            let step_seed = MaskSeed::new(config.seed, STREAM_DROPOUT, step).stream_key();
            step += 1;
            let fwd = graph.forward_train(&images, config.rate_train, step_seed)?;
            let (loss, grad) = config.loss.evaluate(&fwd.output, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_index });
            }
            let grads = graph.backward(&fwd.tape, &grad)?;
            optimizer.step(&mut graph.params().write(), &grads, lr)?;
            loss_sum += loss * labels.len() as f64;
            positions += labels.len();
            correct += predictions(&fwd.output).iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let validation_accuracy = match validation {
            Some(v) => {
                let probs = Predictor::Vanilla(graph).predict(v.images(), config.batch_size)?;
                Some(accuracy(&probs, &v.position_labels())?)
            }
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / positions as f64,
            train_accuracy: correct as f64 / positions as f64,
            validation_accuracy,
        });
    }
    Ok(TrainOutcome { weights: graph.params().read().clone(), history })
}
