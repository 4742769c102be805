use super::{check_same_shape, Shape, Tensor};
use crate::error::{Axis, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNormParams {
    /// Unit scale, zero shift, zero mean and unit variance.
    pub fn identity(channels: usize, epsilon: f64) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, v) in [("beta", &self.beta), ("running_mean", &self.running_mean), ("running_var", &self.running_var)] {
            if v.len() != c {
                return Err(Error::InvalidShape(format!("batch-norm {name} has length {}, expected {c}", v.len())));
            }
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidShape("batch-norm running_var must be >= 0".into()));
        }
        if self.epsilon < 0.0 {
            return Err(Error::InvalidShape("batch-norm epsilon must be >= 0".into()));
        }
        Ok(())
    }

    /// Exponential moving update of the running statistics from a training batch.
    pub fn update_running(&mut self, cache: &BatchNormCache, momentum: f64) {
        let count = cache.count as f64;
        for c in 0..self.channels() {
            let unbiased = if cache.count > 1 {
                cache.batch_var[c] * count / (count - 1.0)
            } else {
                cache.batch_var[c]
            };
            self.running_mean[c] = (1.0 - momentum) * self.running_mean[c] + momentum * cache.batch_mean[c];
            self.running_var[c] = (1.0 - momentum) * self.running_var[c] + momentum * unbiased;
        }
    }
}

fn check_channels(op: &'static str, input: Shape, channels: usize) -> Result<()> {
    if input.c != channels {
        return Err(Error::dim(op, Axis::Channel, channels, input.c));
    }
    Ok(())
}

/// Per-channel affine normalization with running statistics.
pub fn batchnorm_inference(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    params.validate()?;
    let s = input.shape();
    check_channels("batchnorm_inference", s, params.channels())?;
    let mut out = input.clone();
    let plane = s.plane();
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = i % s.c;
        let scale = params.gamma[c] / (params.running_var[c] + params.epsilon).sqrt();
        let mean = params.running_mean[c];
        let beta = params.beta[c];
        for v in chunk {
            *v = (*v - mean) * scale + beta;
        }
    }
    Ok(out)
}

pub fn batchnorm_inference_backward(params: &BatchNormParams, grad_output: &Tensor) -> Result<Tensor> {
    let s = grad_output.shape();
    check_channels("batchnorm_inference_backward", s, params.channels())?;
    let mut out = grad_output.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(s.plane()).enumerate() {
        let c = i % s.c;
        let scale = params.gamma[c] / (params.running_var[c] + params.epsilon).sqrt();
        chunk.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

/// Saved state of a training-mode batch-norm forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub batch_var: Vec<f64>,
    pub count: usize,
}

/// Batch-statistics normalization. Running statistics are not touched; see
/// [`BatchNormParams::update_running`].
pub fn batchnorm_train(input: &Tensor, params: &BatchNormParams) -> Result<(Tensor, BatchNormCache)> {
    params.validate()?;
    let s = input.shape();
    check_channels("batchnorm_train", s, params.channels())?;
    let plane = s.plane();
    let count = s.n * plane;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            mean[c] += input.plane(n, c).iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for n in 0..s.n {
        for c in 0..s.c {
            var[c] += input.plane(n, c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.epsilon).sqrt()).collect();

    let mut normalized = input.clone();
    let mut out = input.clone();
    for (i, (xn, y)) in normalized
        .data_mut()
        .chunks_exact_mut(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
        .enumerate()
    {
        let c = i % s.c;
        for (a, b) in xn.iter_mut().zip(y.iter_mut()) {
            *a = (*a - mean[c]) * inv_std[c];
            *b = *a * params.gamma[c] + params.beta[c];
        }
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            count,
        },
    ))
}

/// Returns (grad_input, grad_gamma, grad_beta).
pub fn batchnorm_train_backward(
    cache: &BatchNormCache,
    params: &BatchNormParams,
    grad_output: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let s = grad_output.shape();
    check_same_shape("batchnorm_train_backward", cache.normalized.shape(), s)?;
    let plane = s.plane();
    let mut sum_g = vec![0.0; s.c];
    let mut sum_gx = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_output.plane(n, c);
            let x = cache.normalized.plane(n, c);
            sum_g[c] += g.iter().sum::<f64>();
            sum_gx[c] += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let m = cache.count as f64;
    let mut grad_in = grad_output.clone();
    for (i, chunk) in grad_in.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = i % s.c;
        let x = &cache.normalized.data()[i * plane..(i + 1) * plane];
        let k = params.gamma[c] * cache.inv_std[c] / m;
        for (g, &xh) in chunk.iter_mut().zip(x) {
            *g = k * (m * *g - sum_g[c] - xh * sum_gx[c]);
        }
    }
    Ok((grad_in, sum_gx, sum_g))
}

pub fn relu(input: &Tensor) -> Tensor {
    // Written so NaN passes through instead of becoming 0.
    input.map(|v| if v < 0.0 { 0.0 } else { v })
}

pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    check_same_shape("relu_backward", input.shape(), grad_output.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(input.shape(), data))
}

/// Flat input indices of the selected maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPoolCache {
    pub input_shape: Shape,
    pub argmax: Vec<usize>,
}

/// Max pooling without padding. Ties resolve to the first element in row-major scan order.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, MaxPoolCache)> {
    let s = input.shape();
    if window == 0 || stride == 0 {
        return Err(Error::InvalidShape("maxpool window and stride must be positive".into()));
    }
    if s.h < window {
        return Err(Error::dim("maxpool2d", Axis::Height, window, s.h));
    }
    if s.w < window {
        return Err(Error::dim("maxpool2d", Axis::Width, window, s.w));
    }
    let oh = (s.h - window) / stride + 1;
    let ow = (s.w - window) / stride + 1;
    let os = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(os.len());
    let mut argmax = Vec::with_capacity(os.len());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = input.index(n, c, oy * stride, ox * stride);
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = input.index(n, c, oy * stride + ky, ox * stride + kx);
                            if input.data()[idx] > best {
                                best = input.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(input.data()[best_idx]);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::from_parts(os, out), MaxPoolCache { input_shape: s, argmax }))
}

pub fn maxpool2d_backward(cache: &MaxPoolCache, grad_output: &Tensor) -> Result<Tensor> {
    if grad_output.data().len() != cache.argmax.len() {
        return Err(Error::dim("maxpool2d_backward", Axis::Length, cache.argmax.len(), grad_output.data().len()));
    }
    let mut grad = vec![0.0; cache.input_shape.len()];
    for (&idx, &g) in cache.argmax.iter().zip(grad_output.data()) {
        grad[idx] += g;
    }
    Ok(Tensor::from_parts(cache.input_shape, grad))
}

pub fn global_avgpool(input: &Tensor) -> Tensor {
    let s = input.shape();
    let plane = s.plane() as f64;
    let data = input.data().chunks_exact(s.plane()).map(|p| p.iter().sum::<f64>() / plane).collect();
    Tensor::from_parts(Shape::new(s.n, s.c, 1, 1), data)
}

pub fn global_avgpool_backward(input_shape: Shape, grad_output: &Tensor) -> Result<Tensor> {
    let expected = Shape::new(input_shape.n, input_shape.c, 1, 1);
    check_same_shape("global_avgpool_backward", expected, grad_output.shape())?;
    let plane = input_shape.plane();
    let mut data = Vec::with_capacity(input_shape.len());
    for &g in grad_output.data() {
        data.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    Ok(Tensor::from_parts(input_shape, data))
}

/// Fully connected layer over the flattened C·H·W features. Weights are out×in row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub out_features: usize,
    pub in_features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn new(out_features: usize, in_features: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let p = DenseParams {
            out_features,
            in_features,
            weights,
            bias,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_features == 0 || self.in_features == 0 {
            return Err(Error::InvalidShape("dense dims must be >= 1".into()));
        }
        if self.weights.len() != self.out_features * self.in_features {
            return Err(Error::dim("dense", Axis::Length, self.out_features * self.in_features, self.weights.len()));
        }
        if self.bias.len() != self.out_features {
            return Err(Error::dim("dense", Axis::Feature, self.out_features, self.bias.len()));
        }
        Ok(())
    }
}

pub fn dense(input: &Tensor, params: &DenseParams) -> Result<Tensor> {
    params.validate()?;
    let s = input.shape();
    if s.item_len() != params.in_features {
        return Err(Error::dim("dense", Axis::Feature, params.in_features, s.item_len()));
    }
    let mut out = Vec::with_capacity(s.n * params.out_features);
    for _ in 0..s.n {
        out.extend_from_slice(&params.bias);
    }
    super::conv::gemm(s.n, params.in_features, params.out_features, input.data(), false, &params.weights, true, 1.0, &mut out);
    Ok(Tensor::from_parts(Shape::new(s.n, params.out_features, 1, 1), out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn dense_backward(input: &Tensor, params: &DenseParams, grad_output: &Tensor) -> Result<(Tensor, DenseGrads)> {
    let s = input.shape();
    if s.item_len() != params.in_features {
        return Err(Error::dim("dense_backward", Axis::Feature, params.in_features, s.item_len()));
    }
    let gs = grad_output.shape();
    if gs.n != s.n {
        return Err(Error::dim("dense_backward", Axis::Batch, s.n, gs.n));
    }
    if gs.item_len() != params.out_features {
        return Err(Error::dim("dense_backward", Axis::Feature, params.out_features, gs.item_len()));
    }
    let (o, f) = (params.out_features, params.in_features);
    let mut grad_in = vec![0.0; s.len()];
    super::conv::gemm(s.n, o, f, grad_output.data(), false, &params.weights, false, 0.0, &mut grad_in);
    let mut grad_w = vec![0.0; o * f];
    super::conv::gemm(o, s.n, f, grad_output.data(), true, input.data(), false, 0.0, &mut grad_w);
    let mut grad_b = vec![0.0; o];
    for row in grad_output.data().chunks_exact(o) {
        grad_b.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
    Ok((Tensor::from_parts(s, grad_in), DenseGrads { weights: grad_w, bias: grad_b }))
}

/// Softmax across the channel axis at every (n, h, w) position.
pub fn softmax(input: &Tensor) -> Tensor {
    let s = input.shape();
    let plane = s.plane();
    let mut out = input.clone();
    let mut buf = vec![0.0; s.c];
    for n in 0..s.n {
        let item = &mut out.data_mut()[n * s.item_len()..(n + 1) * s.item_len()];
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..s.c {
                buf[c] = item[c * plane + p];
                max = max.max(buf[c]);
            }
            let mut sum = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for c in 0..s.c {
                item[c * plane + p] = buf[c] / sum;
            }
        }
    }
    out
}

/// Vector-Jacobian product of softmax given its output.
pub fn softmax_backward(output: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    check_same_shape("softmax_backward", output.shape(), grad_output.shape())?;
    let s = output.shape();
    let plane = s.plane();
    let mut grad = grad_output.clone();
    for n in 0..s.n {
        let y = output.item(n);
        let range = n * s.item_len()..(n + 1) * s.item_len();
        let g = &mut grad.data_mut()[range];
        for p in 0..plane {
            let dot: f64 = (0..s.c).map(|c| g[c * plane + p] * y[c * plane + p]).sum();
            for c in 0..s.c {
                g[c * plane + p] = y[c * plane + p] * (g[c * plane + p] - dot);
            }
        }
    }
    Ok(grad)
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("residual_add", a.shape(), b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape(), data))
}

pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::InvalidShape("upsample factor must be positive".into()));
    }
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let mut out = Vec::with_capacity(os.len());
    for plane in input.data().chunks_exact(s.plane()) {
        for y in 0..os.h {
            let row = &plane[(y / factor) * s.w..(y / factor + 1) * s.w];
            for x in 0..os.w {
                out.push(row[x / factor]);
            }
        }
    }
    Ok(Tensor::from_parts(os, out))
}

pub fn upsample_nearest_backward(input_shape: Shape, factor: usize, grad_output: &Tensor) -> Result<Tensor> {
    let expected = Shape::new(input_shape.n, input_shape.c, input_shape.h * factor, input_shape.w * factor);
    check_same_shape("upsample_nearest_backward", expected, grad_output.shape())?;
    let mut grad = vec![0.0; input_shape.len()];
    for (gp, dst) in grad_output
        .data()
        .chunks_exact(expected.plane())
        .zip(grad.chunks_exact_mut(input_shape.plane()))
    {
        for y in 0..expected.h {
            for x in 0..expected.w {
                dst[(y / factor) * input_shape.w + x / factor] += gp[y * expected.w + x];
            }
        }
    }
    Ok(Tensor::from_parts(input_shape, grad))
}
