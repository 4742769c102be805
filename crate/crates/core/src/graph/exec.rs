use super::ensemble::EnsembleOutput;
use super::{BranchedModel, Layer, ModelGraph};
use crate::error::{Error, Result};
use crate::stochastic::{
    element_dropout_in_place, fused_dropout_conv, sample_spatial_mask, spatial_dropout_item, DropoutMode, MaskSeed,
};
use crate::tensor::serialize::LayerWeights;
use crate::tensor::{
    batchnorm_inference, conv2d, dense, global_avgpool, maxpool2d, relu, residual_add, softmax, upsample_nearest,
    ConvParams, Shape, Tensor,
};
use std::ops::Range;

/// Layer executions attributed to the backbone prefix and to the stochastic
/// suffix. One layer applied to `k` stacked replicas counts `k` times.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub backbone_layer_execs: usize,
    pub branch_layer_execs: usize,
}

impl ExecStats {
    pub fn total(&self) -> usize {
        self.backbone_layer_execs + self.branch_layer_execs
    }
}

/// Activation plus pending residual skips.
#[derive(Debug, Clone)]
pub(crate) struct ActState {
    pub x: Tensor,
    pub skips: Vec<Tensor>,
}

impl ActState {
    fn replicate(&self, copies: usize) -> ActState {
        ActState {
            x: self.x.repeat_batch(copies),
            skips: self.skips.iter().map(|s| s.repeat_batch(copies)).collect(),
        }
    }
}

/// How dropout-sites behave during an inference pass. The batch is viewed as
/// `branches.len()` equal blocks; block `j` draws its masks from branch `branches[j]`.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Sampling<'a> {
    Off,
    MonteCarlo {
        seed: u64,
        branches: &'a [usize],
        rate: f64,
        mode: DropoutMode,
        fused: bool,
    },
}

impl Sampling<'_> {
    fn blocks(&self) -> usize {
        match self {
            Sampling::Off => 1,
            Sampling::MonteCarlo { branches, .. } => branches.len(),
        }
    }
}

pub(crate) fn conv_param(params: &[LayerWeights], idx: usize) -> &ConvParams {
    match &params[idx] {
        LayerWeights::Conv(p) => p,
        other => panic!("param {idx} is {}, expected conv (graph not validated)", other.kind_name()),
    }
}

/// Runs `layers[range]` over `state`. `split` decides which counter each layer feeds.
pub(crate) fn run_range(
    layers: &[Layer],
    params: &[LayerWeights],
    range: Range<usize>,
    mut state: ActState,
    sampling: Sampling<'_>,
    split: usize,
    stats: &mut ExecStats,
) -> Result<ActState> {
    let blocks = sampling.blocks();
    let mut i = range.start;
    while i < range.end {
        let count = |stats: &mut ExecStats, idx: usize| {
            if idx < split {
                stats.backbone_layer_execs += blocks;
            } else {
                stats.branch_layer_execs += blocks;
            }
        };
        count(stats, i);
        let layer = layers[i];
        let step = apply_layer(layers, params, i, layer, &mut state, sampling).map_err(|e| e.at_layer(i))?;
        if step == 2 {
            count(stats, i + 1);
        }
        i += step;
    }
    Ok(state)
}

/// Returns how many layers were consumed (2 when a dropout-site was fused with its conv).
fn apply_layer(
    layers: &[Layer],
    params: &[LayerWeights],
    index: usize,
    layer: Layer,
    state: &mut ActState,
    sampling: Sampling<'_>,
) -> Result<usize> {
    let x = &state.x;
    let next = match layer {
        Layer::Conv { param } => conv2d(x, conv_param(params, param))?,
        Layer::BatchNorm { param } => match &params[param] {
            LayerWeights::BatchNorm(p) => batchnorm_inference(x, p)?,
            _ => unreachable!("validated graph"),
        },
        Layer::Relu => relu(x),
        Layer::MaxPool { window, stride } => maxpool2d(x, window, stride)?.0,
        Layer::GlobalAvgPool => global_avgpool(x),
        Layer::Dense { param } => match &params[param] {
            LayerWeights::Dense(p) => dense(x, p)?,
            _ => unreachable!("validated graph"),
        },
        Layer::Softmax => softmax(x),
        Layer::Upsample { factor } => upsample_nearest(x, factor)?,
        Layer::ResidualBegin => {
            state.skips.push(x.clone());
            return Ok(1);
        }
        Layer::ResidualEnd { shortcut } => {
            let skip = state
                .skips
                .pop()
                .ok_or_else(|| Error::InvalidGraph("residual end without pending skip".into()))?;
            let skip = match shortcut {
                Some(p) => conv2d(&skip, conv_param(params, p))?,
                None => skip,
            };
            residual_add(x, &skip)?
        }
        Layer::DropoutSite => match sampling {
            Sampling::Off => return Ok(1),
            Sampling::MonteCarlo {
                seed,
                branches,
                rate,
                mode,
                fused,
            } => {
                let s = x.shape();
                if s.n % branches.len() != 0 {
                    return Err(Error::InvalidShape(format!(
                        "batch {} not divisible into {} branch blocks",
                        s.n,
                        branches.len()
                    )));
                }
                let per = s.n / branches.len();
                if fused && mode == DropoutMode::Spatial {
                    let conv = match layers.get(index + 1) {
                        Some(Layer::Conv { param }) => conv_param(params, *param),
                        _ => return Err(Error::InvalidGraph("dropout-site must precede a conv".into())),
                    };
                    let mut outs = Vec::with_capacity(branches.len());
                    for (j, &b) in branches.iter().enumerate() {
                        let mask = sample_spatial_mask(s.c, rate, MaskSeed::new(seed, b, index))?;
                        let block = x.slice_batch(j * per, (j + 1) * per)?;
                        outs.push(fused_dropout_conv(&block, conv, &mask, rate)?);
                    }
                    state.x = Tensor::concat_batch(&outs)?;
                    return Ok(2);
                }
                let mut out = x.clone();
                let block_len = per * s.item_len();
                for (j, &b) in branches.iter().enumerate() {
                    let block = &mut out.data_mut()[j * block_len..(j + 1) * block_len];
                    let mask_seed = MaskSeed::new(seed, b, index);
                    match mode {
                        DropoutMode::Spatial => {
                            let mask = sample_spatial_mask(s.c, rate, mask_seed)?;
                            for item in block.chunks_exact_mut(s.item_len()) {
                                spatial_dropout_item(item, s.plane(), &mask, rate);
                            }
                        }
                        DropoutMode::Element => element_dropout_in_place(block, rate, mask_seed),
                    }
                }
                out
            }
        },
    };
    state.x = next;
    Ok(1)
}

pub(crate) fn infer_shapes(layers: &[Layer], params: &[LayerWeights], input: Shape) -> Result<Vec<Shape>> {
    let mut shapes = Vec::with_capacity(layers.len() + 1);
    let mut skips: Vec<Shape> = Vec::new();
    let mut s = input;
    for (i, layer) in layers.iter().enumerate() {
        shapes.push(s);
        let annotate = |e: Error| e.at_layer(i);
        s = match *layer {
            Layer::Conv { param } => conv_param(params, param).output_shape(s).map_err(annotate)?,
            Layer::BatchNorm { param } => {
                if let LayerWeights::BatchNorm(p) = &params[param] {
                    if p.channels() != s.c {
                        return Err(Error::dim("batchnorm", crate::error::Axis::Channel, p.channels(), s.c).at_layer(i));
                    }
                }
                s
            }
            Layer::Relu | Layer::Softmax | Layer::DropoutSite => s,
            Layer::MaxPool { window, stride } => {
                if s.h < window || s.w < window {
                    return Err(Error::InvalidShape(format!("pool window {window} exceeds {}x{}", s.h, s.w)).at_layer(i));
                }
                Shape::new(s.n, s.c, (s.h - window) / stride + 1, (s.w - window) / stride + 1)
            }
            Layer::GlobalAvgPool => Shape::new(s.n, s.c, 1, 1),
            Layer::Dense { param } => match &params[param] {
                LayerWeights::Dense(p) => {
                    if p.in_features != s.item_len() {
                        return Err(
                            Error::dim("dense", crate::error::Axis::Feature, p.in_features, s.item_len()).at_layer(i)
                        );
                    }
                    Shape::new(s.n, p.out_features, 1, 1)
                }
                _ => unreachable!("validated graph"),
            },
            Layer::Upsample { factor } => Shape::new(s.n, s.c, s.h * factor, s.w * factor),
            Layer::ResidualBegin => {
                skips.push(s);
                s
            }
            Layer::ResidualEnd { shortcut } => {
                let skip = skips.pop().expect("validated nesting");
                let projected = match shortcut {
                    Some(p) => conv_param(params, p).output_shape(skip).map_err(annotate)?,
                    None => skip,
                };
                if projected != s {
                    return Err(Error::InvalidShape(format!(
                        "residual shapes differ: {:?} vs {:?}",
                        projected.dims(),
                        s.dims()
                    ))
                    .at_layer(i));
                }
                s
            }
        };
    }
    shapes.push(s);
    Ok(shapes)
}

fn split_index(graph: &ModelGraph) -> usize {
    graph.first_stochastic_index().unwrap_or(graph.layers().len())
}

fn full_pass(graph: &ModelGraph, input: &Tensor, sampling: Sampling<'_>, stats: &mut ExecStats) -> Result<Tensor> {
    let params = graph.params().read();
    let state = ActState {
        x: input.clone(),
        skips: Vec::new(),
    };
    let layers = graph.layers();
    let out = run_range(layers, &params, 0..layers.len(), state, sampling, split_index(graph), stats)?;
    Ok(out.x)
}

/// Single deterministic pass; every dropout-site is the identity.
pub fn run_vanilla(graph: &ModelGraph, input: &Tensor) -> Result<Tensor> {
    full_pass(graph, input, Sampling::Off, &mut ExecStats::default())
}

/// `m` independent full passes; pass `i` samples masks from `MaskSeed(seed, i, layer)`.
pub fn run_mcdo(graph: &ModelGraph, input: &Tensor, m: usize, seed: u64) -> Result<EnsembleOutput> {
    run_mcdo_with_stats(graph, input, m, seed).map(|(out, _)| out)
}

pub fn run_mcdo_with_stats(
    graph: &ModelGraph,
    input: &Tensor,
    m: usize,
    seed: u64,
) -> Result<(EnsembleOutput, ExecStats)> {
    if m == 0 {
        return Err(Error::InvalidShape("MCDO needs at least one sample".into()));
    }
    let spec = graph.dropout();
    let mut stats = ExecStats::default();
    let mut samples = Vec::with_capacity(m);
    for i in 0..m {
        let branches = [i];
        let sampling = Sampling::MonteCarlo {
            seed,
            branches: &branches,
            rate: spec.rate_inf,
            mode: spec.mode,
            fused: false,
        };
        samples.push(full_pass(graph, input, sampling, &mut stats)?);
    }
    Ok((EnsembleOutput::from_samples(samples)?, stats))
}

/// Cached backbone output (activation and any open residual skips).
#[derive(Debug, Clone)]
pub struct BackboneCache {
    state: ActState,
    batch: usize,
}

impl BackboneCache {
    pub fn activation(&self) -> &Tensor {
        &self.state.x
    }
}

impl BranchedModel {
    /// Executes the deterministic prefix once.
    pub fn run_backbone(&self, input: &Tensor, stats: &mut ExecStats) -> Result<BackboneCache> {
        let params = self.graph.params().read();
        let state = ActState {
            x: input.clone(),
            skips: Vec::new(),
        };
        let state = run_range(self.graph.layers(), &params, 0..self.split, state, Sampling::Off, self.split, stats)?;
        Ok(BackboneCache {
            state,
            batch: input.shape().n,
        })
    }

    /// Replicates the cache `num_branches` times along the batch axis and runs
    /// all branches as one batched pass. Returns per-branch outputs in branch order.
    pub fn run_branches(
        &self,
        cache: &BackboneCache,
        seed: u64,
        fused: bool,
        stats: &mut ExecStats,
    ) -> Result<Vec<Tensor>> {
        let params = self.graph.params().read();
        let spec = self.graph.dropout();
        let branches: Vec<usize> = (0..self.num_branches).collect();
        let sampling = Sampling::MonteCarlo {
            seed,
            branches: &branches,
            rate: spec.rate_inf,
            mode: spec.mode,
            fused,
        };
        let layers = self.graph.layers();
        let state = cache.state.replicate(self.num_branches);
        let out = run_range(layers, &params, self.split..layers.len(), state, sampling, self.split, stats)?;
        let outs = out.x.split_batch(self.num_branches)?;
        debug_assert!(outs.iter().all(|t| t.shape().n == cache.batch));
        Ok(outs)
    }
}

/// Backbone once, then all branches batched.
pub fn run_branched(branched: &BranchedModel, input: &Tensor, seed: u64) -> Result<EnsembleOutput> {
    run_branched_with_stats(branched, input, seed, false).map(|(out, _)| out)
}

/// As [`run_branched`], with each dropout-site fused into its following conv.
pub fn run_branched_fused(branched: &BranchedModel, input: &Tensor, seed: u64) -> Result<EnsembleOutput> {
    run_branched_with_stats(branched, input, seed, true).map(|(out, _)| out)
}

pub fn run_branched_with_stats(
    branched: &BranchedModel,
    input: &Tensor,
    seed: u64,
    fused: bool,
) -> Result<(EnsembleOutput, ExecStats)> {
    let mut stats = ExecStats::default();
    let cache = branched.run_backbone(input, &mut stats)?;
    let samples = branched.run_branches(&cache, seed, fused, &mut stats)?;
    Ok((EnsembleOutput::from_samples(samples)?, stats))
}

/// Mean of the members' vanilla outputs. Members must share one architecture.
pub fn run_deep_ensemble(graphs: &[ModelGraph], input: &Tensor) -> Result<EnsembleOutput> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::InvalidGraph("deep ensemble needs at least one member".into()))?;
    for (i, g) in graphs.iter().enumerate().skip(1) {
        if g.layers() != first.layers() {
            return Err(Error::InvalidGraph(format!("ensemble member {i}: layer list differs")));
        }
        let a = first.params().read();
        let b = g.params().read();
        if a.len() != b.len() || a.iter().zip(b.iter()).any(|(x, y)| !x.same_layout(y)) {
            return Err(Error::InvalidGraph(format!("ensemble member {i}: weight layout differs")));
        }
    }
    let samples = graphs.iter().map(|g| run_vanilla(g, input)).collect::<Result<Vec<_>>>()?;
    EnsembleOutput::from_samples(samples)
}

#[cfg(test)]
mod tests {
    use super::super::split_at;
    use super::*;
    use crate::stochastic::DropoutSpec;
    use crate::tensor::{BatchNormParams, DenseParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    /// conv-bn-relu, residual block with dropout inside, pool, dense, softmax.
    fn toy(rate_inf: f64) -> ModelGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = vec![
            LayerWeights::Conv(ConvParams::new([4, 2, 3, 3], rand_vec(&mut rng, 72, 0.5), rand_vec(&mut rng, 4, 0.1), 1, 1).unwrap()),
            LayerWeights::BatchNorm(BatchNormParams {
                gamma: rand_vec(&mut rng, 4, 1.0),
                beta: rand_vec(&mut rng, 4, 0.2),
                running_mean: rand_vec(&mut rng, 4, 0.2),
                running_var: vec![1.3, 0.7, 1.0, 2.0],
                epsilon: 1e-5,
            }),
            LayerWeights::Conv(ConvParams::new([4, 4, 3, 3], rand_vec(&mut rng, 144, 0.4), rand_vec(&mut rng, 4, 0.1), 1, 1).unwrap()),
            LayerWeights::Dense(DenseParams::new(3, 4, rand_vec(&mut rng, 12, 1.0), rand_vec(&mut rng, 3, 0.1)).unwrap()),
        ];
        let layers = vec![
            Layer::Conv { param: 0 },
            Layer::BatchNorm { param: 1 },
            Layer::Relu,
            Layer::ResidualBegin,
            Layer::DropoutSite,
            Layer::Conv { param: 2 },
            Layer::ResidualEnd { shortcut: None },
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Dense { param: 3 },
            Layer::Softmax,
        ];
        ModelGraph::new(layers, params, DropoutSpec::spatial(0.1, rate_inf).unwrap()).unwrap()
    }

    fn input(n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        Tensor::from_dims([n, 2, 5, 5], rand_vec(&mut rng, n * 50, 1.0)).unwrap()
    }

    #[test]
    fn vanilla_ignores_seed_and_matches_mcdo_at_zero_rate() {
        let g = toy(0.0);
        let x = input(2);
        let v = run_vanilla(&g, &x).unwrap();
        let mc = run_mcdo(&g, &x, 1, 123).unwrap();
        assert_eq!(mc.mean_probs, v);
        let g_high = toy(0.5);
        assert_eq!(run_vanilla(&g_high, &x).unwrap(), v);
    }

    #[test]
    fn mcdo_is_deterministic_and_averages() {
        let g = toy(0.5);
        let x = input(3);
        let a = run_mcdo(&g, &x, 3, 7).unwrap();
        let b = run_mcdo(&g, &x, 3, 7).unwrap();
        assert_eq!(a, b);
        for i in 0..a.mean_probs.data().len() {
            let avg = a.per_sample_probs.iter().map(|t| t.data()[i]).sum::<f64>() / 3.0;
            assert!((avg - a.mean_probs.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn branched_matches_sequential_and_counts_layers() {
        let g = toy(0.5);
        let x = input(2);
        for m in [1, 2, 3, 5] {
            let b = split_at(&g, m).unwrap();
            let (seq, seq_stats) = run_mcdo_with_stats(&g, &x, m, 11).unwrap();
            let (br, br_stats) = run_branched_with_stats(&b, &x, 11, false).unwrap();
            let (fu, _) = run_branched_with_stats(&b, &x, 11, true).unwrap();
            for (s, t) in seq.per_sample_probs.iter().zip(&br.per_sample_probs) {
                assert!(s.max_abs_diff(t) <= 1e-9);
            }
            assert!(seq.mean_probs.max_abs_diff(&fu.mean_probs) <= 1e-9);
            assert_eq!(br_stats.backbone_layer_execs, b.backbone().len());
            assert_eq!(br_stats.total(), b.backbone().len() + m * b.branch_template().len());
            assert_eq!(seq_stats.total(), m * g.layers().len());
        }
    }

    #[test]
    fn layer_errors_carry_index() {
        let g = toy(0.1);
        let wrong = Tensor::zeros(Shape::new(1, 3, 5, 5));
        match run_vanilla(&g, &wrong).unwrap_err() {
            Error::Layer { index, .. } => assert_eq!(index, 0),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn deep_ensemble_members() {
        let a = toy(0.1);
        let x = input(2);
        let single = run_deep_ensemble(std::slice::from_ref(&a), &x).unwrap();
        assert_eq!(single.mean_probs, run_vanilla(&a, &x).unwrap());
        let pair = run_deep_ensemble(&[a.clone(), a.fork()], &x).unwrap();
        assert!(pair.mean_probs.max_abs_diff(&single.mean_probs) < 1e-15);
        let other = ModelGraph::new(
            vec![Layer::GlobalAvgPool, Layer::Softmax],
            vec![],
            DropoutSpec::spatial(0.1, 0.1).unwrap(),
        )
        .unwrap();
        assert!(run_deep_ensemble(&[a, other], &x).is_err());
    }

    #[test]
    fn shapes_propagate() {
        let g = toy(0.1);
        let shapes = g.infer_shapes(Shape::new(2, 2, 5, 5)).unwrap();
        assert_eq!(shapes.len(), g.layers().len() + 1);
        assert_eq!(*shapes.last().unwrap(), Shape::new(2, 3, 1, 1));
    }
}
