use super::exec::conv_param;
use super::{Layer, ModelGraph};
use crate::error::{Error, Result};
use crate::stochastic::{keep_scale, sample_spatial_mask, DropoutMode, MaskSeed};
use crate::tensor::serialize::LayerWeights;
use crate::tensor::{
    backward, batchnorm_train, conv2d, dense, global_avgpool, maxpool2d, relu, residual_add, softmax,
    upsample_nearest, ForwardContext, ParamGrad, Tensor,
};
use rand::Rng;

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
enum TapeEntry {
    Op { param: Option<usize>, ctx: ForwardContext },
    /// Per-element multiplier applied by an active dropout-site (0 or 1/(1-rate)).
    Dropout { multipliers: Vec<f64> },
    Identity,
    ResidualBegin,
    ResidualEnd { shortcut: Option<(usize, ForwardContext)> },
}

/// Forward record of one training pass, consumed by [`ModelGraph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    entries: Vec<TapeEntry>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainStep {
    pub output: Tensor,
    pub tape: Tape,
}

fn add_into(acc: &mut Option<ParamGrad>, g: ParamGrad) {
    fn add(a: &mut [f64], b: &[f64]) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
    match (acc.as_mut(), &g) {
        (None, _) => *acc = Some(g),
        (Some(ParamGrad::Conv { weights, bias }), ParamGrad::Conv { weights: w, bias: b })
        | (Some(ParamGrad::Dense { weights, bias }), ParamGrad::Dense { weights: w, bias: b }) => {
            add(weights, w);
            add(bias, b);
        }
        (Some(ParamGrad::BatchNorm { gamma, beta }), ParamGrad::BatchNorm { gamma: g2, beta: b2 }) => {
            add(gamma, g2);
            add(beta, b2);
        }
        _ => unreachable!("one param index always yields one gradient kind"),
    }
}

impl ModelGraph {
    /// Training-mode forward pass: batch-norm uses batch statistics (running
    /// statistics are updated afterwards) and every dropout-site is active at
    /// `dropout_rate`, with masks drawn per example from `MaskSeed(step_seed, example, layer)`.
    pub fn forward_train(&self, input: &Tensor, dropout_rate: f64, step_seed: u64) -> Result<TrainStep> {
        crate::stochastic::check_rate(dropout_rate)?;
        let mode = self.dropout().mode;
        let mut entries = Vec::with_capacity(self.layers().len());
        let mut skips: Vec<Tensor> = Vec::new();
        let mut bn_updates = Vec::new();
        let mut x = input.clone();
        {
            let params = self.params().read();
            for (i, layer) in self.layers().iter().enumerate() {
                let step = (|| -> Result<(Tensor, TapeEntry)> {
                    Ok(match *layer {
                        Layer::Conv { param } => {
                            let p = conv_param(&params, param);
                            let y = conv2d(&x, p)?;
                            (y, TapeEntry::Op { param: Some(param), ctx: ForwardContext::Conv2d { input: x.clone(), params: p.clone() } })
                        }
                        Layer::BatchNorm { param } => {
                            let LayerWeights::BatchNorm(p) = &params[param] else { unreachable!("validated graph") };
                            let (y, cache) = batchnorm_train(&x, p)?;
                            bn_updates.push((param, cache.clone()));
                            (y, TapeEntry::Op { param: Some(param), ctx: ForwardContext::BatchNormTrain { cache, params: p.clone() } })
                        }
                        Layer::Relu => (relu(&x), TapeEntry::Op { param: None, ctx: ForwardContext::Relu { input: x.clone() } }),
                        Layer::MaxPool { window, stride } => {
                            let (y, cache) = maxpool2d(&x, window, stride)?;
                            (y, TapeEntry::Op { param: None, ctx: ForwardContext::MaxPool2d { cache } })
                        }
                        Layer::GlobalAvgPool => (
                            global_avgpool(&x),
                            TapeEntry::Op { param: None, ctx: ForwardContext::GlobalAvgPool { input_shape: x.shape() } },
                        ),
                        Layer::Dense { param } => {
                            let LayerWeights::Dense(p) = &params[param] else { unreachable!("validated graph") };
                            let y = dense(&x, p)?;
                            (y, TapeEntry::Op { param: Some(param), ctx: ForwardContext::Dense { input: x.clone(), params: p.clone() } })
                        }
                        Layer::Softmax => {
                            let y = softmax(&x);
                            (y.clone(), TapeEntry::Op { param: None, ctx: ForwardContext::Softmax { output: y } })
                        }
                        Layer::Upsample { factor } => {
                            let y = upsample_nearest(&x, factor)?;
                            (y, TapeEntry::Op { param: None, ctx: ForwardContext::UpsampleNearest { input_shape: x.shape(), factor } })
                        }
                        Layer::ResidualBegin => {
                            skips.push(x.clone());
                            (x.clone(), TapeEntry::ResidualBegin)
                        }
                        Layer::ResidualEnd { shortcut } => {
                            let skip = skips.pop().ok_or_else(|| Error::InvalidGraph("unbalanced residual".into()))?;
                            match shortcut {
                                Some(p) => {
                                    let cp = conv_param(&params, p);
                                    let projected = conv2d(&skip, cp)?;
                                    let ctx = ForwardContext::Conv2d { input: skip, params: cp.clone() };
                                    (residual_add(&x, &projected)?, TapeEntry::ResidualEnd { shortcut: Some((p, ctx)) })
                                }
                                None => (residual_add(&x, &skip)?, TapeEntry::ResidualEnd { shortcut: None }),
                            }
                        }
                        Layer::DropoutSite if dropout_rate == 0.0 => (x.clone(), TapeEntry::Identity),
                        Layer::DropoutSite => {
                            let s = x.shape();
                            let scale = keep_scale(dropout_rate);
                            let mut multipliers = Vec::with_capacity(s.len());
                            for n in 0..s.n {
                                let seed = MaskSeed::new(step_seed, n, i);
                                match mode {
                                    DropoutMode::Spatial => {
                                        let mask = sample_spatial_mask(s.c, dropout_rate, seed)?;
                                        for &keep in mask.kept() {
                                            let m = if keep { scale } else { 0.0 };
                                            multipliers.extend(std::iter::repeat_n(m, s.plane()));
                                        }
                                    }
                                    DropoutMode::Element => {
                                        let mut rng = seed.rng();
                                        for _ in 0..s.item_len() {
                                            let keep = rng.random::<f64>() >= dropout_rate;
                                            multipliers.push(if keep { scale } else { 0.0 });
                                        }
                                    }
                                }
                            }
                            let mut y = x.clone();
                            y.data_mut().iter_mut().zip(&multipliers).for_each(|(v, m)| *v *= m);
                            (y, TapeEntry::Dropout { multipliers })
                        }
                    })
                })()
                .map_err(|e| e.at_layer(i))?;
                x = step.0;
                entries.push(step.1);
            }
        }
        let mut params = self.params().write();
        for (idx, cache) in &bn_updates {
            if let LayerWeights::BatchNorm(p) = &mut params[*idx] {
                p.update_running(cache, BN_MOMENTUM);
            }
        }
        Ok(TrainStep {
            output: x,
            tape: Tape { entries },
        })
    }

    /// Parameter gradients (indexed like the weight store) for `grad_output`
    /// w.r.t. the output recorded in `tape`.
    pub fn backward(&self, tape: &Tape, grad_output: &Tensor) -> Result<Vec<Option<ParamGrad>>> {
        self.backward_with_input(tape, grad_output).map(|(g, _)| g)
    }

    /// As [`ModelGraph::backward`], also returning the gradient w.r.t. the input.
    pub fn backward_with_input(&self, tape: &Tape, grad_output: &Tensor) -> Result<(Vec<Option<ParamGrad>>, Tensor)> {
        if tape.entries.len() != self.layers().len() {
            return Err(Error::MissingContext("model graph"));
        }
        let mut grads: Vec<Option<ParamGrad>> = vec![None; self.params().read().len()];
        let mut skip_grads: Vec<Tensor> = Vec::new();
        let mut g = grad_output.clone();
        for (i, entry) in tape.entries.iter().enumerate().rev() {
            let result = (|| -> Result<Tensor> {
                Ok(match entry {
                    TapeEntry::Op { param, ctx } => {
                        let out = backward(ctx.kind(), Some(ctx), &g)?;
                        if let (Some(p), Some(pg)) = (param, out.params) {
                            add_into(&mut grads[*p], pg);
                        }
                        out.input
                    }
                    TapeEntry::Dropout { multipliers } => {
                        let mut gi = g.clone();
                        gi.data_mut().iter_mut().zip(multipliers).for_each(|(v, m)| *v *= m);
                        gi
                    }
                    TapeEntry::Identity => g.clone(),
                    TapeEntry::ResidualEnd { shortcut } => {
                        let skip_grad = match shortcut {
                            Some((p, ctx)) => {
                                let out = backward(ctx.kind(), Some(ctx), &g)?;
                                if let Some(pg) = out.params {
                                    add_into(&mut grads[*p], pg);
                                }
                                out.input
                            }
                            None => g.clone(),
                        };
                        skip_grads.push(skip_grad);
                        g.clone()
                    }
                    TapeEntry::ResidualBegin => {
                        let skip = skip_grads.pop().ok_or_else(|| Error::InvalidGraph("unbalanced residual".into()))?;
                        residual_add(&g, &skip)?
                    }
                })
            })()
            .map_err(|e| e.at_layer(i))?;
            g = result;
        }
        Ok((grads, g))
    }
}
