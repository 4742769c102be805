use super::{
    batchnorm_inference_backward, batchnorm_train_backward, conv2d_backward, dense_backward, global_avgpool_backward,
    maxpool2d_backward, relu_backward, softmax_backward, upsample_nearest_backward, BatchNormCache, BatchNormParams,
    ConvParams, DenseParams, MaxPoolCache, Shape, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv2d,
    BatchNormTrain,
    BatchNormInference,
    Relu,
    MaxPool2d,
    GlobalAvgPool,
    Dense,
    Softmax,
    UpsampleNearest,
    ResidualAdd,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNormTrain => "batchnorm_train",
            OpKind::BatchNormInference => "batchnorm_inference",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::GlobalAvgPool => "global_avgpool",
            OpKind::Dense => "dense",
            OpKind::Softmax => "softmax",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::ResidualAdd => "residual_add",
        }
    }
}

/// Whatever a forward op must retain for its backward pass.
#[derive(Debug, Clone)]
pub enum ForwardContext {
    Conv2d { input: Tensor, params: ConvParams },
    BatchNormTrain { cache: BatchNormCache, params: BatchNormParams },
    BatchNormInference { params: BatchNormParams },
    Relu { input: Tensor },
    MaxPool2d { cache: MaxPoolCache },
    GlobalAvgPool { input_shape: Shape },
    Dense { input: Tensor, params: DenseParams },
    Softmax { output: Tensor },
    UpsampleNearest { input_shape: Shape, factor: usize },
    ResidualAdd,
}

impl ForwardContext {
    pub fn kind(&self) -> OpKind {
        match self {
            ForwardContext::Conv2d { .. } => OpKind::Conv2d,
            ForwardContext::BatchNormTrain { .. } => OpKind::BatchNormTrain,
            ForwardContext::BatchNormInference { .. } => OpKind::BatchNormInference,
            ForwardContext::Relu { .. } => OpKind::Relu,
            ForwardContext::MaxPool2d { .. } => OpKind::MaxPool2d,
            ForwardContext::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            ForwardContext::Dense { .. } => OpKind::Dense,
            ForwardContext::Softmax { .. } => OpKind::Softmax,
            ForwardContext::UpsampleNearest { .. } => OpKind::UpsampleNearest,
            ForwardContext::ResidualAdd => OpKind::ResidualAdd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Conv { weights: Vec<f64>, bias: Vec<f64> },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
    Dense { weights: Vec<f64>, bias: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct OpGradients {
    /// Gradient w.r.t. the (first) input. For `ResidualAdd` both inputs receive this value.
    pub input: Tensor,
    pub params: Option<ParamGrad>,
}

/// Backward pass of one op from its recorded forward context.
pub fn backward(kind: OpKind, ctx: Option<&ForwardContext>, grad_output: &Tensor) -> Result<OpGradients> {
    let ctx = match ctx {
        Some(c) if c.kind() == kind => c,
        _ => return Err(Error::MissingContext(kind.name())),
    };
    let (input, params) = match ctx {
        ForwardContext::Conv2d { input, params } => {
            let (gi, g) = conv2d_backward(input, params, grad_output)?;
            (gi, Some(ParamGrad::Conv { weights: g.weights, bias: g.bias }))
        }
        ForwardContext::BatchNormTrain { cache, params } => {
            let (gi, gamma, beta) = batchnorm_train_backward(cache, params, grad_output)?;
            (gi, Some(ParamGrad::BatchNorm { gamma, beta }))
        }
        ForwardContext::BatchNormInference { params } => (batchnorm_inference_backward(params, grad_output)?, None),
        ForwardContext::Relu { input } => (relu_backward(input, grad_output)?, None),
        ForwardContext::MaxPool2d { cache } => (maxpool2d_backward(cache, grad_output)?, None),
        ForwardContext::GlobalAvgPool { input_shape } => (global_avgpool_backward(*input_shape, grad_output)?, None),
        ForwardContext::Dense { input, params } => {
            let (gi, g) = dense_backward(input, params, grad_output)?;
            (gi, Some(ParamGrad::Dense { weights: g.weights, bias: g.bias }))
        }
        ForwardContext::Softmax { output } => (softmax_backward(output, grad_output)?, None),
        ForwardContext::UpsampleNearest { input_shape, factor } => {
            (upsample_nearest_backward(*input_shape, *factor, grad_output)?, None)
        }
        ForwardContext::ResidualAdd => (grad_output.clone(), None),
    };
    Ok(OpGradients { input, params })
}
