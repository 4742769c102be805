//! Model graphs, the backbone/branch split, and the MCDO executors.
//!
//! A [`ModelGraph`] is a flat layer list with residual begin/end markers and
//! dropout-site markers. All weights live in one shared store, so every
//! branch of a [`BranchedModel`] reads the same values.

mod autodiff;
mod ensemble;
mod exec;
mod flops;

pub use autodiff::{Tape, TrainStep};
pub use ensemble::{aggregate, entropy_map, Aggregate, EnsembleOutput};
pub use exec::{
    run_branched, run_branched_fused, run_branched_with_stats, run_deep_ensemble, run_mcdo, run_mcdo_with_stats,
    run_vanilla, BackboneCache, ExecStats,
};
pub use flops::{executor_flops, layer_flops, ExecutorKind};

use crate::error::{Error, Result};
use crate::stochastic::DropoutSpec;
use crate::tensor::serialize::LayerWeights;
use crate::tensor::Shape;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Layer {
    Conv { param: usize },
    BatchNorm { param: usize },
    Relu,
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Dense { param: usize },
    Softmax,
    Upsample { factor: usize },
    /// Pushes the current activation as a skip connection.
    ResidualBegin,
    /// Pops the innermost skip, optionally projects it with a conv, and adds it.
    ResidualEnd { shortcut: Option<usize> },
    /// Stochastic layer; must directly precede a conv.
    DropoutSite,
}

impl Layer {
    pub fn is_dropout_site(&self) -> bool {
        matches!(self, Layer::DropoutSite)
    }
}

/// Weight store shared by every view of a model.
#[derive(Debug, Clone, Default)]
pub struct SharedParams(Arc<RwLock<Vec<LayerWeights>>>);

impl SharedParams {
    pub fn new(params: Vec<LayerWeights>) -> Self {
        SharedParams(Arc::new(RwLock::new(params)))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Vec<LayerWeights>> {
        self.0.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Vec<LayerWeights>> {
        self.0.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn same_store(&self, other: &SharedParams) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Independent copy of the current values.
    pub fn deep_copy(&self) -> SharedParams {
        SharedParams::new(self.read().clone())
    }
}

/// Layer list plus shared weights and the model's dropout rates.
///
/// `Clone` shares the weight store; use [`ModelGraph::fork`] for an independent copy.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    layers: Vec<Layer>,
    params: SharedParams,
    dropout: DropoutSpec,
}

impl ModelGraph {
    pub fn new(layers: Vec<Layer>, params: Vec<LayerWeights>, dropout: DropoutSpec) -> Result<Self> {
        let g = ModelGraph {
            layers,
            params: SharedParams::new(params),
            dropout,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &SharedParams {
        &self.params
    }

    pub fn dropout(&self) -> DropoutSpec {
        self.dropout
    }

    /// Same layers and weight store, different dropout rates.
    pub fn with_dropout(&self, dropout: DropoutSpec) -> Result<ModelGraph> {
        dropout.validate()?;
        Ok(ModelGraph {
            dropout,
            ..self.clone()
        })
    }

    pub fn fork(&self) -> ModelGraph {
        ModelGraph {
            layers: self.layers.clone(),
            params: self.params.deep_copy(),
            dropout: self.dropout,
        }
    }

    /// Index of the earliest dropout-site.
    pub fn first_stochastic_index(&self) -> Option<usize> {
        self.layers.iter().position(Layer::is_dropout_site)
    }

    pub fn dropout_site_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_dropout_site()).count()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.read().iter().map(LayerWeights::parameter_count).sum()
    }

    pub fn replace_params(&self, params: Vec<LayerWeights>) -> Result<()> {
        {
            let current = self.params.read();
            if current.len() != params.len() {
                return Err(Error::InvalidGraph(format!(
                    "expected {} weight records, got {}",
                    current.len(),
                    params.len()
                )));
            }
            for (i, (a, b)) in current.iter().zip(&params).enumerate() {
                if !a.same_layout(b) {
                    return Err(Error::InvalidGraph(format!(
                        "weight record {i}: layout mismatch ({} vs {})",
                        a.kind_name(),
                        b.kind_name()
                    )));
                }
            }
        }
        *self.params.write() = params;
        Ok(())
    }

    /// Checks dropout placement, residual nesting and parameter references.
    pub fn validate(&self) -> Result<()> {
        self.dropout.validate()?;
        let params = self.params.read();
        let mut depth = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let expect = |idx: usize, kind: &str| -> Result<()> {
                let ok = match (params.get(idx), kind) {
                    (Some(LayerWeights::Conv(_)), "conv") => true,
                    (Some(LayerWeights::BatchNorm(_)), "batchnorm") => true,
                    (Some(LayerWeights::Dense(_)), "dense") => true,
                    _ => false,
                };
                if ok {
                    Ok(())
                } else {
                    Err(Error::InvalidGraph(format!("layer {i}: param {idx} is not a {kind} record")))
                }
            };
            match *layer {
                Layer::Conv { param } => expect(param, "conv")?,
                Layer::BatchNorm { param } => expect(param, "batchnorm")?,
                Layer::Dense { param } => expect(param, "dense")?,
                Layer::ResidualBegin => depth += 1,
                Layer::ResidualEnd { shortcut } => {
                    if depth == 0 {
                        return Err(Error::InvalidGraph(format!("layer {i}: residual end without begin")));
                    }
                    depth -= 1;
                    if let Some(p) = shortcut {
                        expect(p, "conv")?;
                    }
                }
                Layer::DropoutSite => {
                    if !matches!(self.layers.get(i + 1), Some(Layer::Conv { .. })) {
                        return Err(Error::InvalidGraph(format!("layer {i}: dropout-site must precede a conv")));
                    }
                }
                Layer::MaxPool { window, stride } if window == 0 || stride == 0 => {
                    return Err(Error::InvalidGraph(format!("layer {i}: zero pool window/stride")));
                }
                Layer::Upsample { factor: 0 } => {
                    return Err(Error::InvalidGraph(format!("layer {i}: zero upsample factor")));
                }
                _ => {}
            }
        }
        if depth != 0 {
            return Err(Error::InvalidGraph(format!("{depth} unclosed residual block(s)")));
        }
        Ok(())
    }

    /// Activation shape entering each layer, plus the final output shape.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        let params = self.params.read();
        exec::infer_shapes(&self.layers, &params, input)
    }
}

/// Deterministic backbone prefix plus a stochastic branch suffix replicated
/// `num_branches` times; all replicas share one weight store.
#[derive(Debug, Clone)]
pub struct BranchedModel {
    graph: ModelGraph,
    split: usize,
    num_branches: usize,
}

/// One branch replica's view of the shared weights.
#[derive(Debug, Clone)]
pub struct BranchHandle {
    pub index: usize,
    params: SharedParams,
}

impl BranchHandle {
    pub fn params(&self) -> &SharedParams {
        &self.params
    }
}

/// Splits at the first dropout-site.
pub fn split_at(graph: &ModelGraph, num_branches: usize) -> Result<BranchedModel> {
    if num_branches == 0 {
        return Err(Error::InvalidGraph("need at least one branch".into()));
    }
    let split = graph.first_stochastic_index().ok_or(Error::NoDropoutSite)?;
    Ok(BranchedModel {
        graph: graph.clone(),
        split,
        num_branches,
    })
}

impl BranchedModel {
    pub fn backbone(&self) -> &[Layer] {
        &self.graph.layers[..self.split]
    }

    pub fn branch_template(&self) -> &[Layer] {
        &self.graph.layers[self.split..]
    }

    pub fn num_branches(&self) -> usize {
        self.num_branches
    }

    pub fn split_index(&self) -> usize {
        self.split
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn branch(&self, index: usize) -> Option<BranchHandle> {
        (index < self.num_branches).then(|| BranchHandle {
            index,
            params: self.graph.params.clone(),
        })
    }

    /// Reassembles backbone + branch template into one layer list.
    pub fn flatten(&self) -> Vec<Layer> {
        self.backbone().iter().chain(self.branch_template()).copied().collect()
    }
}
