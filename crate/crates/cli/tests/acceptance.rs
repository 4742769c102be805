//! Acceptance gate. Runs every criterion in order (serially, so timings are not
//! disturbed), prints one PASS/FAIL line each and exits non-zero on any failure.
//!
//! `cargo test --test acceptance -- 3 4` runs a subset. Criteria 7 and 8 train on
//! a CIFAR-10 two-class subset when `SMCDO_CIFAR10_DIR` points at the binary
//! batches, otherwise on a synthetic surrogate written in the same format.

mod support;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use smcdo::bench::{default_toy_model, quantile, run_bench, time_calls, BenchConfig, DEFAULT_TOY_INPUT};
use smcdo::data::{
    encode_cifar10, encode_pnm, parse_cifar10, parse_pnm, uncertainty_map_bytes, Cifar10Record, PnmImage, Targets,
    CIFAR10_PIXELS,
};
use smcdo::eval::{accuracy, dice, ece, nll, pixelwise_ece, CalibrationReport, NLL_FLOOR};
use smcdo::graph::{
    executor_flops, layer_flops, run_branched, run_mcdo, split_at, ExecStats, ExecutorKind, Layer, ModelGraph,
};
use smcdo::stochastic::{apply_spatial_dropout, flop_count, fused_dropout_conv, ChannelMask, DropoutSpec};
use smcdo::tensor::serialize::LayerWeights;
use smcdo::tensor::{
    batchnorm_inference, batchnorm_inference_backward, batchnorm_train, batchnorm_train_backward, conv2d,
    conv2d_backward, dense, dense_backward, global_avgpool, global_avgpool_backward, maxpool2d, maxpool2d_backward,
    relu, relu_backward, residual_add, softmax, softmax_backward, upsample_nearest, upsample_nearest_backward,
    BatchNormParams, ConvParams, DenseParams, ParamGrad, Shape, Tensor,
};
use smcdo::train::{cross_entropy_loss, dice_loss};
use smcdo::Error;
use smcdo_cli::commands::{cmd_eval, cmd_train};
use smcdo_cli::config::ExperimentConfig;
use smcdo_cli::{exit_code, run, EXIT_DATA};
use std::path::{Path, PathBuf};
use std::time::Instant;
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, dims: [usize; 4], scale: f64) -> Tensor {
    Tensor::from_dims(dims, uniform(rng, dims.iter().product(), scale)).unwrap()
}

fn conv_params(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize, stride: usize, padding: usize) -> ConvParams {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    ConvParams::new([out_c, in_c, k, k], uniform(rng, out_c * in_c * k * k, 1.7 * std), uniform(rng, out_c, 0.1), stride, padding)
        .unwrap()
}

fn bn_params(rng: &mut ChaCha8Rng, c: usize) -> BatchNormParams {
    BatchNormParams {
        gamma: (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
        beta: uniform(rng, c, 0.3),
        running_mean: uniform(rng, c, 0.3),
        running_var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        epsilon: 1e-5,
    }
}

// ---------------------------------------------------------------- 1

/// Random conv stack: a stem, 1–3 dropout-sites (each directly before a conv,
/// sometimes inside a residual block), optional bn/relu/pool fillers, then
/// pool, dense and softmax. Between 6 and 12 layers.
fn random_toy_model(rng: &mut ChaCha8Rng) -> (ModelGraph, Shape, usize) {
    let in_c = rng.random_range(1..=3);
    let mut h = rng.random_range(6..=9);
    let mut c = rng.random_range(2..=6);
    let mut params = vec![LayerWeights::Conv(conv_params(rng, c, in_c, 3, 1, 1))];
    let mut layers = vec![Layer::Conv { param: 0 }];
    let sites = rng.random_range(1..=3);
    for s in 0..sites {
        let left = 12 - 3 - layers.len() - 2 * (sites - s);
        let filler = rng.random_range(0..=3.min(left));
        for _ in 0..filler {
            match rng.random_range(0..3) {
                0 => {
                    params.push(LayerWeights::BatchNorm(bn_params(rng, c)));
                    layers.push(Layer::BatchNorm { param: params.len() - 1 });
                }
                1 if h >= 4 => {
                    layers.push(Layer::MaxPool { window: 2, stride: 2 });
                    h /= 2;
                }
                _ => layers.push(Layer::Relu),
            }
        }
        let left = 12 - 3 - layers.len() - 2 * (sites - s);
        if left >= 2 && rng.random_bool(0.4) {
            layers.push(Layer::ResidualBegin);
            layers.push(Layer::DropoutSite);
            params.push(LayerWeights::Conv(conv_params(rng, c, c, 3, 1, 1)));
            layers.push(Layer::Conv { param: params.len() - 1 });
            layers.push(Layer::ResidualEnd { shortcut: None });
        } else {
            let out = rng.random_range(2..=6);
            layers.push(Layer::DropoutSite);
            params.push(LayerWeights::Conv(conv_params(rng, out, c, 3, 1, 1)));
            layers.push(Layer::Conv { param: params.len() - 1 });
            c = out;
        }
    }
    let classes = rng.random_range(2..=5);
    layers.push(Layer::GlobalAvgPool);
    params.push(LayerWeights::Dense(DenseParams::new(classes, c, uniform(rng, classes * c, 1.0), uniform(rng, classes, 0.1)).unwrap()));
    layers.push(Layer::Dense { param: params.len() - 1 });
    layers.push(Layer::Softmax);
    let dropout = DropoutSpec::spatial(0.1, rng.random_range(0.05..0.9)).unwrap();
    let input = Shape::new(rng.random_range(1..=3), in_c, h.max(6), h.max(6));
    let n_layers = layers.len();
    (ModelGraph::new(layers, params, dropout).unwrap(), input, n_layers)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let (mut min_len, mut max_len) = (usize::MAX, 0);
    for i in 0..50 {
        let (g, shape, len) = random_toy_model(&mut rng);
        min_len = min_len.min(len);
        max_len = max_len.max(len);
        let sites = g.dropout_site_count();
        if !(1..=3).contains(&sites) || !(4..=12).contains(&len) {
            return Err(format!("model {i}: {len} layers, {sites} sites"));
        }
        let x = tensor(&mut rng, shape.dims(), 1.0);
        for m in [1, 2, 3, 5] {
            let seed = rng.random();
            let seq = run_mcdo(&g, &x, m, seed).map_err(|e| e.to_string())?;
            let br = run_branched(&split_at(&g, m).unwrap(), &x, seed).map_err(|e| e.to_string())?;
            worst = worst.max(seq.max_abs_diff(&br));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && secs < 60.0,
        format!("50 models ({min_len}-{max_len} layers) × M∈{{1,2,3,5}}: max diff {worst:.2e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = rng.random_range(1..=8);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let side = rng.random_range(k..=9);
        let dims = [rng.random_range(1..=3), c, side, side + rng.random_range(0..2)];
        let x = tensor(&mut rng, dims, 1.0);
        let (out, stride, pad) = (rng.random_range(1..=6), rng.random_range(1..=2), rng.random_range(0..=k / 2));
        let p = conv_params(&mut rng, out, c, k, stride, pad);
        let rate = rng.random_range(0.0..0.9);
        let mut kept: Vec<bool> = (0..c).map(|_| rng.random::<f64>() >= rate).collect();
        if !kept.contains(&true) {
            kept[rng.random_range(0..c)] = true;
        }
        let mask = ChannelMask::new(kept, rate).unwrap();
        let fused = fused_dropout_conv(&x, &p, &mask, rate).map_err(|e| e.to_string())?;
        let dense = conv2d(&apply_spatial_dropout(&x, &mask, rate).unwrap(), &p).unwrap();
        worst = worst.max(fused.max_abs_diff(&dense));
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-9 && secs < 30.0, format!("100 cases: max diff {worst:.2e}, {secs:.2}s"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let g = default_toy_model(DropoutSpec::spatial(0.1, 0.75).unwrap(), 3).unwrap();
    let shapes = g.infer_shapes(DEFAULT_TOY_INPUT).unwrap();
    let mut ratios = Vec::new();
    {
        let params = g.params().read();
        for (i, layer) in g.layers().iter().enumerate() {
            if !layer.is_dropout_site() {
                continue;
            }
            let Some(Layer::Conv { param }) = g.layers().get(i + 1) else { unreachable!() };
            let LayerWeights::Conv(conv) = &params[*param] else { unreachable!() };
            let c = shapes[i].c;
            let mut kept = vec![false; c];
            let mut order: Vec<usize> = (0..c).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(i as u64));
            order[..c / 4].iter().for_each(|&k| kept[k] = true);
            let mask = ChannelMask::new(kept, 0.75).unwrap();
            ratios.push(flop_count(conv, shapes[i], Some(&mask)) as f64 / flop_count(conv, shapes[i], None) as f64);
        }
    }
    let exact = !ratios.is_empty() && ratios.iter().all(|&r| r == 0.25);

    // Stochastic path only: the backbone is shared and identical in both executors.
    let m = 3;
    let b = split_at(&g, m).unwrap();
    let x = Tensor::filled(DEFAULT_TOY_INPUT, 0.3);
    let cache = b.run_backbone(&x, &mut ExecStats::default()).unwrap();
    let time = |fused: bool| {
        let t = time_calls(5, 41, || b.run_branches(&cache, 9, fused, &mut ExecStats::default()).map(drop)).unwrap();
        quantile(&t, 0.5)
    };
    let dense_ms = time(false);
    let fused_ms = time(true);
    let e2e = |kind| {
        let r = smcdo::bench::Runner::new(kind, &g, &[], m, 9).unwrap();
        quantile(&time_calls(5, 41, || r.run(&x)).unwrap(), 0.5)
    };
    let e2e_dense = e2e(ExecutorKind::McdoBranched);
    let e2e_fused = e2e(ExecutorKind::McdoBranchedFused);
    let sampled = executor_flops(&g, DEFAULT_TOY_INPUT, ExecutorKind::McdoBranchedFused, m, 9).unwrap() as f64
        / executor_flops(&g, DEFAULT_TOY_INPUT, ExecutorKind::McdoBranched, m, 9).unwrap() as f64;
    let ratio = fused_ms / dense_ms;
    check(
        exact && ratio <= 0.6,
        format!(
            "{} stochastic convs at 25% kept: flop ratios {ratios:?}; stochastic path fused {fused_ms:.3} ms vs dense {dense_ms:.3} ms (×{ratio:.2}); \
             end-to-end {e2e_fused:.3} vs {e2e_dense:.3} ms (×{:.2}); sampled-mask executor flop ratio {sampled:.3}",
            ratios.len(),
            e2e_fused / e2e_dense
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let g = default_toy_model(DropoutSpec::spatial(0.1, 0.3).unwrap(), 4).unwrap();
    let per_layer = layer_flops(&g, DEFAULT_TOY_INPUT).unwrap();
    let split = g.first_stochastic_index().unwrap();
    let backbone_share = per_layer[..split].iter().sum::<u64>() as f64 / per_layer.iter().sum::<u64>() as f64;
    let x = Tensor::filled(DEFAULT_TOY_INPUT, 0.3);
    let cfg = BenchConfig {
        warmup_iters: 5,
        timed_iters: 41,
        executors: vec![ExecutorKind::McdoSequential, ExecutorKind::McdoBranched],
    };
    let recs = run_bench(&g, &[], &x, &cfg, 3, 4).map_err(|e| e.to_string())?;
    let by = |k| recs.iter().find(|r| r.executor == k).unwrap().median_ms;
    let (van, seq, br) = (by(ExecutorKind::Vanilla), by(ExecutorKind::McdoSequential), by(ExecutorKind::McdoBranched));
    let overhead = seq / van;
    check(
        backbone_share >= 0.5 && br < seq && (2.25..=3.75).contains(&overhead),
        format!(
            "backbone {:.0}% of FLOPs; median vanilla {van:.3} ms, sequential {seq:.3} ms (×{overhead:.2}), branched {br:.3} ms (×{:.2})",
            100.0 * backbone_share,
            br / van
        ),
    )
}

// ---------------------------------------------------------------- 5

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Largest per-coordinate relative error between an analytic gradient and the
/// central difference of `f` at `x`. The denominator is floored so that
/// coordinates with a vanishing gradient are judged on absolute error.
fn fd_error(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut p = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        p[i] = x[i] + FD_H;
        let up = f(&p);
        p[i] = x[i] - FD_H;
        let down = f(&p);
        p[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_H);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with(shape: Shape, v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

/// Values at least 0.02 apart from each other and from zero, so max-pool and
/// relu stay away from ties and kinks under the finite-difference step.
fn separated(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 0.02 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    v.shuffle(rng);
    Tensor::from_dims(dims, v).unwrap()
}

fn random_dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(2..=5), rng.random_range(2..=5)]
}

fn fd_op(name: &str, instances: usize, rng: &mut ChaCha8Rng, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) -> (String, f64) {
    let worst = (0..instances).map(|_| one(rng)).fold(0.0, f64::max);
    (name.to_string(), worst)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20;
    let mut results = Vec::new();

    results.push(fd_op("conv2d", n, &mut rng, |rng| {
        let c = rng.random_range(1..=3);
        let k = [1, 3][rng.random_range(0..2)];
        let dims = [rng.random_range(1..=2), c, rng.random_range(k..=5), rng.random_range(k..=5)];
        let x = tensor(rng, dims, 1.0);
        let (out, stride, pad) = (rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(0..=k / 2));
        let p = conv_params(rng, out, c, k, stride, pad);
        let r = tensor(rng, p.output_shape(x.shape()).unwrap().dims(), 1.0);
        let (gx, gp) = conv2d_backward(&x, &p, &r).unwrap();
        let ex = fd_error(x.data(), gx.data(), |v| dot(&conv2d(&with(x.shape(), v), &p).unwrap(), &r));
        let ew = fd_error(&p.weights, &gp.weights, |v| {
            dot(&conv2d(&x, &ConvParams { weights: v.to_vec(), ..p.clone() }).unwrap(), &r)
        });
        let eb = fd_error(&p.bias, &gp.bias, |v| dot(&conv2d(&x, &ConvParams { bias: v.to_vec(), ..p.clone() }).unwrap(), &r));
        ex.max(ew).max(eb)
    }));

    results.push(fd_op("batchnorm_train", n, &mut rng, |rng| {
        let mut dims = random_dims(rng);
        dims[0] = dims[0].max(2);
        let x = tensor(rng, dims, 1.0);
        let p = bn_params(rng, dims[1]);
        let r = tensor(rng, dims, 1.0);
        let (_, cache) = batchnorm_train(&x, &p).unwrap();
        let (gx, gg, gb) = batchnorm_train_backward(&cache, &p, &r).unwrap();
        let f = |x: &Tensor, p: &BatchNormParams| dot(&batchnorm_train(x, p).unwrap().0, &r);
        let ex = fd_error(x.data(), gx.data(), |v| f(&with(x.shape(), v), &p));
        let eg = fd_error(&p.gamma, &gg, |v| f(&x, &BatchNormParams { gamma: v.to_vec(), ..p.clone() }));
        let eb = fd_error(&p.beta, &gb, |v| f(&x, &BatchNormParams { beta: v.to_vec(), ..p.clone() }));
        ex.max(eg).max(eb)
    }));

    results.push(fd_op("batchnorm_inference", n, &mut rng, |rng| {
        let dims = random_dims(rng);
        let x = tensor(rng, dims, 1.0);
        let p = bn_params(rng, dims[1]);
        let r = tensor(rng, dims, 1.0);
        let gx = batchnorm_inference_backward(&p, &r).unwrap();
        fd_error(x.data(), gx.data(), |v| dot(&batchnorm_inference(&with(x.shape(), v), &p).unwrap(), &r))
    }));

    results.push(fd_op("relu", n, &mut rng, |rng| {
        let dims = random_dims(rng);
        let x = separated(rng, dims);
        let r = tensor(rng, dims, 1.0);
        let gx = relu_backward(&x, &r).unwrap();
        fd_error(x.data(), gx.data(), |v| dot(&relu(&with(x.shape(), v)), &r))
    }));

    results.push(fd_op("maxpool2d", n, &mut rng, |rng| {
        let (window, stride) = [(2, 2), (3, 1), (2, 1), (3, 2)][rng.random_range(0..4)];
        let dims = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(3..=6), rng.random_range(3..=6)];
        let x = separated(rng, dims);
        let (y, cache) = maxpool2d(&x, window, stride).unwrap();
        let r = tensor(rng, y.shape().dims(), 1.0);
        let gx = maxpool2d_backward(&cache, &r).unwrap();
        fd_error(x.data(), gx.data(), |v| dot(&maxpool2d(&with(x.shape(), v), window, stride).unwrap().0, &r))
    }));

    results.push(fd_op("global_avgpool", n, &mut rng, |rng| {
        let dims = random_dims(rng);
        let x = tensor(rng, dims, 1.0);
        let r = tensor(rng, [dims[0], dims[1], 1, 1], 1.0);
        let gx = global_avgpool_backward(x.shape(), &r).unwrap();
        fd_error(x.data(), gx.data(), |v| dot(&global_avgpool(&with(x.shape(), v)), &r))
    }));

    results.push(fd_op("dense", n, &mut rng, |rng| {
        let dims = random_dims(rng);
        let x = tensor(rng, dims, 1.0);
        let inf = dims[1] * dims[2] * dims[3];
        let out = rng.random_range(1..=4);
        let p = DenseParams::new(out, inf, uniform(rng, out * inf, 0.5), uniform(rng, out, 0.2)).unwrap();
        let r = tensor(rng, [dims[0], out, 1, 1], 1.0);
        let (gx, gp) = dense_backward(&x, &p, &r).unwrap();
        let ex = fd_error(x.data(), gx.data(), |v| dot(&dense(&with(x.shape(), v), &p).unwrap(), &r));
        let ew = fd_error(&p.weights, &gp.weights, |v| dot(&dense(&x, &DenseParams { weights: v.to_vec(), ..p.clone() }).unwrap(), &r));
        let eb = fd_error(&p.bias, &gp.bias, |v| dot(&dense(&x, &DenseParams { bias: v.to_vec(), ..p.clone() }).unwrap(), &r));
        ex.max(ew).max(eb)
    }));

    results.push(fd_op("softmax", n, &mut rng, |rng| {
        let mut dims = random_dims(rng);
        dims[1] = dims[1].max(2);
        let x = tensor(rng, dims, 2.0);
        let r = tensor(rng, dims, 1.0);
        let gx = softmax_backward(&softmax(&x), &r).unwrap();
        fd_error(x.data(), gx.data(), |v| dot(&softmax(&with(x.shape(), v)), &r))
    }));

    results.push(fd_op("upsample_nearest", n, &mut rng, |rng| {
        let dims = random_dims(rng);
        let factor = rng.random_range(1..=3);
        let x = tensor(rng, dims, 1.0);
        let y = upsample_nearest(&x, factor).unwrap();
        let r = tensor(rng, y.shape().dims(), 1.0);
        let gx = upsample_nearest_backward(x.shape(), factor, &r).unwrap();
        fd_error(x.data(), gx.data(), |v| dot(&upsample_nearest(&with(x.shape(), v), factor).unwrap(), &r))
    }));

    results.push(fd_op("residual_add", n, &mut rng, |rng| {
        let dims = random_dims(rng);
        let a = tensor(rng, dims, 1.0);
        let b = tensor(rng, dims, 1.0);
        let r = tensor(rng, dims, 1.0);
        let grad = smcdo::tensor::backward(
            smcdo::tensor::OpKind::ResidualAdd,
            Some(&smcdo::tensor::ForwardContext::ResidualAdd),
            &r,
        )
        .unwrap()
        .input;
        let ea = fd_error(a.data(), grad.data(), |v| dot(&residual_add(&with(a.shape(), v), &b).unwrap(), &r));
        let eb = fd_error(b.data(), grad.data(), |v| dot(&residual_add(&a, &with(b.shape(), v)).unwrap(), &r));
        ea.max(eb)
    }));

    // Whole-graph backward through residual blocks and active spatial dropout.
    results.push(fd_op("model_graph", n, &mut rng, |rng| {
        let (g, shape, _) = random_toy_model(rng);
        let x = tensor(rng, shape.dims(), 1.0);
        let seed = rng.random();
        let rate = rng.random_range(0.1..0.6);
        let step = g.forward_train(&x, rate, seed).unwrap();
        let r = tensor(rng, step.output.shape().dims(), 1.0);
        let (grads, gx) = g.backward_with_input(&step.tape, &r).unwrap();
        let loss = |g: &ModelGraph, x: &Tensor| dot(&g.forward_train(x, rate, seed).unwrap().output, &r);
        let ex = fd_error(x.data(), gx.data(), |v| loss(&g, &with(x.shape(), v)));
        // first conv weights
        let Some(ParamGrad::Conv { weights: gw, .. }) = &grads[0] else { unreachable!("stem is a conv") };
        let w0 = match &g.params().read()[0] {
            LayerWeights::Conv(c) => c.weights.clone(),
            _ => unreachable!(),
        };
        let ew = fd_error(&w0, gw, |v| {
            if let LayerWeights::Conv(c) = &mut g.params().write()[0] {
                c.weights.copy_from_slice(v);
            }
            loss(&g, &x)
        });
        ex.max(ew)
    }));

    results.push(fd_op("cross_entropy_loss", n, &mut rng, |rng| {
        let mut dims = random_dims(rng);
        dims[1] = dims[1].max(2);
        let probs = softmax(&tensor(rng, dims, 2.0));
        let labels: Vec<usize> = (0..dims[0] * dims[2] * dims[3]).map(|_| rng.random_range(0..dims[1])).collect();
        let (_, g) = cross_entropy_loss(&probs, &labels).unwrap();
        fd_error(probs.data(), g.data(), |v| cross_entropy_loss(&with(probs.shape(), v), &labels).unwrap().0)
    }));

    results.push(fd_op("dice_loss", n, &mut rng, |rng| {
        let mut dims = random_dims(rng);
        dims[1] = 2;
        let probs = softmax(&tensor(rng, dims, 2.0));
        let mask: Vec<u8> = (0..dims[0] * dims[2] * dims[3]).map(|_| rng.random_range(0..2)).collect();
        let (_, g) = dice_loss(&probs, &mask).unwrap();
        fd_error(probs.data(), g.data(), |v| dice_loss(&with(probs.shape(), v), &mask).unwrap().0)
    }));

    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<&(String, f64)> = results.iter().filter(|(_, e)| !(*e <= FD_TOL)).collect();
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    check(
        failing.is_empty() && secs < 120.0,
        format!(
            "{} ops/losses × {n} instances, worst rel. error {worst:.1e}{}, {secs:.1}s",
            results.len(),
            if failing.is_empty() { String::new() } else { format!(", failing {failing:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 6

/// Brute force: for each bin scan every sample and test `lo < conf <= hi`
/// (bin 0 also takes everything at or below its upper edge).
fn ece_oracle(conf: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let (mut count, mut hits, mut sum) = (0u64, 0u64, 0.0);
        for (&c, &ok) in conf.iter().zip(correct) {
            let inside = if b == 0 { c <= hi } else if b + 1 == bins { c > lo } else { c > lo && c <= hi };
            if inside {
                count += 1;
                hits += u64::from(ok);
                sum += c;
            }
        }
        if count > 0 {
            total += count as f64 / n * (hits as f64 / count as f64 - sum / count as f64).abs();
        }
    }
    total
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = Vec::new();
    for inst in 0..1000 {
        let n = rng.random_range(1..=60);
        let k = rng.random_range(2..=6);
        let bins: usize = [1, 2, 5, 10, 15, 20][rng.random_range(0..6)];
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            // A quarter of the rows sit exactly on a bin edge.
            let row: Vec<f64> = if k == 2 && rng.random_bool(0.25) {
                let edge = rng.random_range(bins.div_ceil(2)..=bins) as f64 / bins as f64;
                vec![edge, 1.0 - edge]
            } else {
                let logits = uniform(&mut rng, k, 3.0);
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                logits.iter().map(|v| v.exp() / z).collect()
            };
            data.extend(row);
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let probs = Tensor::from_dims([n, k, 1, 1], data.clone()).unwrap();
        let (mut conf, mut correct) = (Vec::new(), Vec::new());
        for (row, &l) in data.chunks(k).zip(&labels) {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            conf.push(row[best]);
            correct.push(best == l);
        }
        let got = ece(&probs, &labels, bins).unwrap();
        if got != ece_oracle(&conf, &correct, bins) {
            mismatches.push(format!("ece #{inst}"));
        }
        let acc = correct.iter().filter(|&&c| c).count() as f64 / n as f64;
        if accuracy(&probs, &labels).unwrap() != acc {
            mismatches.push(format!("accuracy #{inst}"));
        }
        let mut nll_loop = 0.0;
        for (row, &l) in data.chunks(k).zip(&labels) {
            nll_loop -= if row[l] < NLL_FLOOR { NLL_FLOOR } else { row[l] }.ln();
        }
        if nll(&probs, &labels).unwrap() != nll_loop / n as f64 {
            mismatches.push(format!("nll #{inst}"));
        }
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let (mut inter, mut sa, mut sb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            inter += f64::from(a[i] * b[i]);
            sa += f64::from(a[i]);
            sb += f64::from(b[i]);
        }
        let want = if sa + sb == 0.0 { 1.0 } else { 2.0 * inter / (sa + sb) };
        if dice(&a, &b).unwrap() != want {
            mismatches.push(format!("dice #{inst}"));
        }
    }

    // Hand-computed cases.
    let rows = |r: &[[f64; 2]]| Tensor::from_dims([r.len(), 2, 1, 1], r.concat()).unwrap();
    let mut hand = Vec::new();
    hand.push((ece(&rows(&[[0.8, 0.2]; 4]), &[0, 0, 1, 1], 15).unwrap() - 0.3).abs() < 1e-15);
    hand.push(ece(&rows(&[[1.0, 0.0], [0.0, 1.0]]), &[0, 1], 15).unwrap() == 0.0);
    hand.push(dice(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap() == 0.5);
    let p1 = [0.9, 0.6, 0.2, 0.55];
    let mut maps: Vec<f64> = p1.iter().map(|p| 1.0 - p).collect();
    maps.extend_from_slice(&p1);
    let maps = Tensor::from_dims([1, 2, 2, 2], maps).unwrap();
    hand.push((pixelwise_ece(&maps, &[1, 0, 0, 1], 2).unwrap() - 0.0375).abs() < 1e-15);
    hand.push((pixelwise_ece(&maps, &[1, 0, 0, 1], 10).unwrap() - 0.1125).abs() < 1e-15);
    let hand_ok = hand.iter().all(|&h| h);
    check(
        mismatches.is_empty() && hand_ok,
        format!(
            "1000 random instances: {} mismatches {:?}; hand examples {}/{}",
            mismatches.len(),
            mismatches.iter().take(5).collect::<Vec<_>>(),
            hand.iter().filter(|&&h| h).count(),
            hand.len()
        ),
    )
}

// ---------------------------------------------------------------- 7, 8

const SUBSET_TRAIN: usize = 2000;
const SUBSET_TEST: usize = 500;
const SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

struct Subset {
    _tmp: TempDir,
    train: Vec<PathBuf>,
    test: Vec<PathBuf>,
    source: String,
}

fn subset() -> Subset {
    let tmp = TempDir::new().unwrap();
    if let Ok(dir) = std::env::var("SMCDO_CIFAR10_DIR") {
        let dir = PathBuf::from(dir);
        let train = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).filter(|p| p.exists()).collect();
        return Subset { _tmp: tmp, train, test: vec![dir.join("test_batch.bin")], source: format!("CIFAR-10 at {}", dir.display()) };
    }
    let train = tmp.path().join("train.bin");
    let test = tmp.path().join("test.bin");
    std::fs::write(&train, support::textured_cifar_bytes(SUBSET_TRAIN, 100)).unwrap();
    std::fs::write(&test, support::textured_cifar_bytes(SUBSET_TEST, 200)).unwrap();
    Subset { _tmp: tmp, train: vec![train], test: vec![test], source: "synthetic textured surrogate".into() }
}

fn subset_config(data: &Subset, out: &Path, k: usize, rate_train: f64, seed: u64, eval: Value) -> ExperimentConfig {
    let cfg = json!({
        "arch": {
            "family": "mini_wrn",
            "depth_blocks": 1,
            "widening_factor": k,
            "base_channels": 8,
            "first_stochastic_layer": 3,
            "num_classes": 2
        },
        "train": {
            "epochs": 8,
            "lr_milestones": [[1, 0.05], [5, 0.01], [7, 0.002]],
            "momentum": 0.9,
            "weight_decay": 0.0005,
            "batch_size": 32,
            "augmentation": {"pad_crop": 4, "horizontal_flip": true},
            "rate_train": rate_train,
            "seed": seed
        },
        "eval": eval,
        "data": {
            "kind": "cifar10",
            "train": data.train,
            "test": data.test,
            "classes": [0, 1],
            "max_train": SUBSET_TRAIN,
            "max_test": SUBSET_TEST
        },
        "output_dir": out
    });
    ExperimentConfig::from_json(&cfg.to_string(), out).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_of(reports: &[CalibrationReport], prefix: &str, f: impl Fn(&CalibrationReport) -> f64) -> f64 {
    let sel: Vec<f64> = reports.iter().filter(|r| r.condition.starts_with(prefix)).map(f).collect();
    assert!(!sel.is_empty(), "no reports for {prefix}");
    sel.iter().sum::<f64>() / sel.len() as f64
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let data = subset();
    let (mut van, mut lo, mut hi, mut acc_lo, mut acc_hi) = (vec![], vec![], vec![], vec![], vec![]);
    for seed in SEEDS {
        let out = TempDir::new().unwrap();
        let eval = json!({
            "m": 3,
            "rate_inf": [0.1, 0.3],
            "corruptions": {"kinds": ["gaussian_noise", "brightness", "contrast", "gaussian_blur", "pixelate"], "levels": [4, 5]},
            "include_clean": false,
            "maps": 0,
            "seed": seed
        });
        let cfg = subset_config(&data, out.path(), 2, 0.1, seed, eval);
        cmd_train(&cfg).map_err(|e| e.to_string())?;
        let reports = cmd_eval(&cfg, None).map_err(|e| e.to_string())?;
        van.push(mean_of(&reports, "vanilla_tr0.1/", |r| r.ece));
        lo.push(mean_of(&reports, "mcdo_m3_tr0.1_inf0.1/", |r| r.ece));
        hi.push(mean_of(&reports, "mcdo_m3_tr0.1_inf0.3/", |r| r.ece));
        acc_lo.push(mean_of(&reports, "mcdo_m3_tr0.1_inf0.1/", |r| r.accuracy));
        acc_hi.push(mean_of(&reports, "mcdo_m3_tr0.1_inf0.3/", |r| r.accuracy));
        eprintln!(
            "  seed {seed}: ece vanilla {:.4} inf0.1 {:.4} inf0.3 {:.4}; acc {:.4} / {:.4}",
            van.last().unwrap(),
            lo.last().unwrap(),
            hi.last().unwrap(),
            acc_lo.last().unwrap(),
            acc_hi.last().unwrap()
        );
    }
    let (mv, ml, mh) = (median(van), median(lo), median(hi));
    let (al, ah) = (median(acc_lo), median(acc_hi));
    let secs = start.elapsed().as_secs_f64();
    check(
        mh <= ml && ml <= mv && mh <= mv && (ah - al).abs() <= 0.03 && secs <= 1800.0,
        format!(
            "{}; median corrupted ECE vanilla {mv:.4}, inf 10% {ml:.4}, inf 30% {mh:.4}; median accuracy {:.1}% vs {:.1}%; {:.0}s",
            data.source,
            100.0 * al,
            100.0 * ah,
            secs
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let data = subset();
    let eval = json!({"m": 3, "rate_inf": [0.5], "include_vanilla": false, "maps": 0});
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let mut acc = [0.0; 2];
        for (slot, k) in [1usize, 2].into_iter().enumerate() {
            let out = TempDir::new().unwrap();
            let cfg = subset_config(&data, out.path(), k, 0.5, seed, eval.clone());
            cmd_train(&cfg).map_err(|e| e.to_string())?;
            let reports = cmd_eval(&cfg, None).map_err(|e| e.to_string())?;
            acc[slot] = mean_of(&reports, "mcdo_m3_tr0.5_inf0.5/clean", |r| r.accuracy);
        }
        wins += usize::from(acc[1] >= acc[0]);
        pairs.push(format!("{:.1}/{:.1}", 100.0 * acc[0], 100.0 * acc[1]));
        eprintln!("  seed {seed}: clean accuracy k=1 {:.4}, k=2 {:.4}", acc[0], acc[1]);
    }
    check(
        wins >= 4,
        format!("{}; k=1/k=2 clean accuracy % per seed {pairs:?}: k=2 ≥ k=1 in {wins}/5; {:.0}s", data.source, start.elapsed().as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let data_dir = TempDir::new().unwrap();
    let base = support::classification_config(data_dir.path());
    let run_once = |name: &str| -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), String> {
        let mut cfg = base.clone();
        cfg["output_dir"] = json!(name);
        let cfg = ExperimentConfig::from_json(&cfg.to_string(), data_dir.path()).map_err(|e| e.to_string())?;
        cmd_train(&cfg).map_err(|e| e.to_string())?;
        cmd_eval(&cfg, None).map_err(|e| e.to_string())?;
        let read = |p: &str| std::fs::read(cfg.output_dir.join(p)).unwrap();
        Ok((read("checkpoints/member0.bin"), read("checkpoints/member0.json"), read("results.csv")))
    };
    let a = run_once("run_a")?;
    let b = run_once("run_b")?;
    let secs = start.elapsed().as_secs_f64();
    check(
        a == b && secs < 300.0,
        format!(
            "weights {} ({} bytes), sidecar {}, results.csv {} ({} rows); {secs:.1}s",
            if a.0 == b.0 { "identical" } else { "differ" },
            a.0.len(),
            if a.1 == b.1 { "identical" } else { "differs" },
            if a.2 == b.2 { "identical" } else { "differs" },
            a.2.iter().filter(|&&c| c == b'\n').count() - 1
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    // CIFAR-10: label byte then 1024 R, 1024 G, 1024 B bytes, row-major.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let records: Vec<Cifar10Record> =
        (0..3).map(|i| Cifar10Record { label: [3, 9, 0][i], pixels: (0..CIFAR10_PIXELS).map(|_| rng.random()).collect() }).collect();
    let bytes = encode_cifar10(&records).unwrap();
    expect(bytes.len() == 3 * 3073 && bytes[0] == 3 && bytes[3073] == 9, "cifar layout");
    let ds = parse_cifar10(&bytes).unwrap();
    expect(matches!(ds.targets(), Targets::Classes(l) if l == &vec![3, 9, 0]), "cifar labels");
    let img = ds.images();
    let px = records[1].pixels[1024 + 5 * 32 + 7];
    expect(img.at(1, 1, 5, 7) == px as f64 / 255.0, "cifar pixel (green, y5, x7)");
    let back: Vec<Cifar10Record> = (0..3)
        .map(|n| Cifar10Record {
            label: records[n].label,
            pixels: img.item(n).iter().map(|v| (v * 255.0).round() as u8).collect(),
        })
        .collect();
    expect(encode_cifar10(&back).unwrap() == bytes, "cifar byte round trip");
    let code = |r: Result<smcdo::data::Dataset, Error>| r.err().map(|e| exit_code(&e));
    expect(code(parse_cifar10(&bytes[..3073 * 2 + 100])) == Some(EXIT_DATA), "truncated cifar → 3");
    let mut bad = bytes.clone();
    bad[3073] = 10;
    expect(code(parse_cifar10(&bad)) == Some(EXIT_DATA), "label 10 → 3");
    expect(code(parse_cifar10(&[])) == Some(EXIT_DATA), "empty cifar → 3");

    // PPM / PGM.
    let ppm = PnmImage::new(2, 1, 3, vec![1, 2, 3, 250, 251, 252]).unwrap();
    let enc = encode_pnm(&ppm);
    expect(enc == b"P6\n2 1\n255\n\x01\x02\x03\xfa\xfb\xfc", "ppm bytes");
    expect(parse_pnm(&enc).unwrap() == ppm, "ppm round trip");
    let pgm = PnmImage::new(1, 2, 1, vec![0, 255]).unwrap();
    expect(encode_pnm(&pgm) == b"P5\n1 2\n255\n\x00\xff", "pgm bytes");
    expect(parse_pnm(b"P5 # comment\n1 2\n# another\n255\n\x00\xff").unwrap() == pgm, "pgm with comments");
    let pnm_code = |b: &[u8]| parse_pnm(b).err().map(|e| exit_code(&e));
    expect(pnm_code(b"P5\n1 2\n255\n\x00") == Some(EXIT_DATA), "truncated pgm → 3");
    expect(pnm_code(b"P2\n1 1\n255\n0") == Some(EXIT_DATA), "ascii pgm → 3");
    expect(pnm_code(b"P5\n1 1\n65535\n\x00\x00") == Some(EXIT_DATA), "16-bit pgm → 3");
    expect(pnm_code(b"P6\n0 1\n255\n") == Some(EXIT_DATA), "zero width → 3");
    let ln2 = std::f64::consts::LN_2;
    expect(uncertainty_map_bytes(&[0.0, ln2 / 2.0, 0.75 * ln2, ln2]) == vec![0, 128, 191, 255], "uncertainty map scaling");

    // Through the CLI: malformed data files exit with 3.
    let tmp = TempDir::new().unwrap();
    let cfg = support::classification_config(tmp.path());
    std::fs::write(tmp.path().join("train.bin"), &bytes[..5000]).unwrap();
    let path = support::write_config(tmp.path(), "c.json", &cfg);
    expect(run(["smcdo", "train", "--config", path.to_str().unwrap()]) == EXIT_DATA, "cli truncated cifar → 3");
    let seg = support::segmentation_config(tmp.path());
    std::fs::write(tmp.path().join("seg_train/sample000.pgm"), b"P5\n20 20\n255\n\x00").unwrap();
    let path = support::write_config(tmp.path(), "s.json", &seg);
    expect(run(["smcdo", "train", "--config", path.to_str().unwrap()]) == EXIT_DATA, "cli truncated pgm → 3");

    check(failures.is_empty(), if failures.is_empty() { "CIFAR-10, PPM and PGM fixtures bit-exact; malformed inputs exit 3".into() } else { format!("failed: {failures:?}") })
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("branched equivalence", criterion_1),
        ("fused-path equivalence", criterion_2),
        ("FLOP speedup proxy", criterion_3),
        ("latency ordering", criterion_4),
        ("gradient correctness", criterion_5),
        ("metric oracles", criterion_6),
        ("contrastive-dropout direction", criterion_7),
        ("capacity trend", criterion_8),
        ("determinism", criterion_9),
        ("ingestion round-trips", criterion_10),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("acceptance {id:>2} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("acceptance {id:>2} {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
