use super::exec::conv_param;
use super::{Layer, ModelGraph};
use crate::error::{Error, Result};
use crate::stochastic::{flop_count, sample_spatial_mask, DropoutMode, MaskSeed};
use crate::tensor::serialize::LayerWeights;
use crate::tensor::Shape;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    Vanilla,
    DeepEnsemble,
    McdoSequential,
    McdoBranched,
    McdoBranchedFused,
}

impl ExecutorKind {
    pub const ALL: [ExecutorKind; 5] = [
        ExecutorKind::Vanilla,
        ExecutorKind::DeepEnsemble,
        ExecutorKind::McdoSequential,
        ExecutorKind::McdoBranched,
        ExecutorKind::McdoBranchedFused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExecutorKind::Vanilla => "vanilla",
            ExecutorKind::DeepEnsemble => "deep_ensemble",
            ExecutorKind::McdoSequential => "mcdo_sequential",
            ExecutorKind::McdoBranched => "mcdo_branched",
            ExecutorKind::McdoBranchedFused => "mcdo_branched_fused",
        }
    }

    pub fn needs_dropout_site(self) -> bool {
        matches!(self, ExecutorKind::McdoBranched | ExecutorKind::McdoBranchedFused)
    }
}

impl fmt::Display for ExecutorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExecutorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExecutorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown executor '{s}'")))
    }
}

/// Dense multiply-accumulate count of every layer (conv, residual projection, dense).
pub fn layer_flops(graph: &ModelGraph, input: Shape) -> Result<Vec<u64>> {
    let shapes = graph.infer_shapes(input)?;
    let params = graph.params().read();
    let mut skips: Vec<Shape> = Vec::new();
    let mut out = Vec::with_capacity(graph.layers().len());
    for (i, layer) in graph.layers().iter().enumerate() {
        let s = shapes[i];
        let macs = match *layer {
            Layer::Conv { param } => flop_count(conv_param(&params, param), s, None),
            Layer::Dense { param } => match &params[param] {
                LayerWeights::Dense(p) => (s.n * p.out_features * p.in_features) as u64,
                _ => unreachable!("validated graph"),
            },
            Layer::ResidualBegin => {
                skips.push(s);
                0
            }
            Layer::ResidualEnd { shortcut } => {
                let skip = skips.pop().expect("validated nesting");
                shortcut.map_or(0, |p| flop_count(conv_param(&params, p), skip, None))
            }
            _ => 0,
        };
        out.push(macs);
    }
    Ok(out)
}

/// Analytic multiply-accumulate count for one executor call with `m` samples.
///
/// The fused count uses the actual masks the executor would sample for `seed`.
pub fn executor_flops(graph: &ModelGraph, input: Shape, kind: ExecutorKind, m: usize, seed: u64) -> Result<u64> {
    let per_layer = layer_flops(graph, input)?;
    let vanilla: u64 = per_layer.iter().sum();
    let m64 = m as u64;
    match kind {
        ExecutorKind::Vanilla => Ok(vanilla),
        ExecutorKind::DeepEnsemble | ExecutorKind::McdoSequential => Ok(m64 * vanilla),
        ExecutorKind::McdoBranched | ExecutorKind::McdoBranchedFused => {
            let split = graph.first_stochastic_index().ok_or(Error::NoDropoutSite)?;
            let backbone: u64 = per_layer[..split].iter().sum();
            let branch: u64 = per_layer[split..].iter().sum();
            if kind == ExecutorKind::McdoBranched || graph.dropout().mode != DropoutMode::Spatial {
                return Ok(backbone + m64 * branch);
            }
            let shapes = graph.infer_shapes(input)?;
            let params = graph.params().read();
            let rate = graph.dropout().rate_inf;
            let mut total = backbone + m64 * branch;
            for (i, layer) in graph.layers().iter().enumerate().skip(split) {
                if !layer.is_dropout_site() {
                    continue;
                }
                let Some(Layer::Conv { param }) = graph.layers().get(i + 1) else {
                    unreachable!("validated graph")
                };
                let conv = conv_param(&params, *param);
                let dense = per_layer[i + 1];
                for b in 0..m {
                    let mask = sample_spatial_mask(shapes[i].c, rate, MaskSeed::new(seed, b, i))?;
                    total = total - dense + flop_count(conv, shapes[i], Some(&mask));
                }
            }
            Ok(total)
        }
    }
}
