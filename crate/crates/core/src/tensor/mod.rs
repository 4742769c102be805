//! Dense fp64 tensors in N×C×H×W layout and the fixed operator set used by
//! the model graph, with analytic backward passes.

mod autograd;
mod conv;
mod ops;
pub mod serialize;

pub use autograd::{backward, ForwardContext, OpGradients, OpKind, ParamGrad};
pub use conv::{conv2d, conv2d_backward, im2col, ConvGrads, ConvParams};
pub use ops::{
    batchnorm_inference, batchnorm_inference_backward, batchnorm_train, batchnorm_train_backward,
    dense, dense_backward, global_avgpool, global_avgpool_backward, maxpool2d, maxpool2d_backward,
    relu, relu_backward, residual_add, softmax, softmax_backward, upsample_nearest,
    upsample_nearest_backward, BatchNormCache, BatchNormParams, DenseGrads, DenseParams,
    MaxPoolCache,
};

use crate::error::{Axis, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be >= 1, got {:?}",
                self.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::dim("Tensor::new", Axis::Length, shape.len(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_dims(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::new(dims[0], dims[1], dims[2], dims[3]), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!(shape.len() > 0, "tensor dimensions must be >= 1");
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Internal constructor for buffers whose length is correct by construction.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous slice of batch item `n`.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Channel plane `c` of batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Batch items `start..end`.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.shape.n {
            return Err(Error::InvalidShape(format!(
                "batch slice {start}..{end} out of range for batch {}",
                self.shape.n
            )));
        }
        let len = self.shape.item_len();
        let shape = Shape { n: end - start, ..self.shape };
        Ok(Tensor::from_parts(shape, self.data[start * len..end * len].to_vec()))
    }

    /// Gathers batch items by index, in the given order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::InvalidShape("empty batch selection".into()));
        }
        let len = self.shape.item_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.shape.n {
                return Err(Error::dim("select_batch", Axis::Batch, self.shape.n, i + 1));
            }
            data.extend_from_slice(self.item(i));
        }
        Ok(Tensor::from_parts(Shape { n: indices.len(), ..self.shape }, data))
    }

    /// Stacks tensors of equal item shape along the batch axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        let mut n = 0;
        for t in parts {
            check_item_shape("concat_batch", s, t.shape)?;
            data.extend_from_slice(&t.data);
            n += t.shape.n;
        }
        Ok(Tensor::from_parts(Shape { n, ..s }, data))
    }

    /// `copies` back-to-back replicas along the batch axis.
    pub fn repeat_batch(&self, copies: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.data.len() * copies);
        for _ in 0..copies {
            data.extend_from_slice(&self.data);
        }
        Tensor::from_parts(Shape { n: self.shape.n * copies, ..self.shape }, data)
    }

    /// Splits into `parts` equal batch chunks.
    pub fn split_batch(&self, parts: usize) -> Result<Vec<Tensor>> {
        if parts == 0 || self.shape.n % parts != 0 {
            return Err(Error::InvalidShape(format!(
                "cannot split batch {} into {parts} equal parts",
                self.shape.n
            )));
        }
        let per = self.shape.n / parts;
        (0..parts).map(|i| self.slice_batch(i * per, (i + 1) * per)).collect()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, nan_max)
    }
}

/// `max` that returns NaN when either side is NaN.
pub(crate) fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

pub(crate) fn check_item_shape(op: &'static str, expected: Shape, found: Shape) -> Result<()> {
    if expected.c != found.c {
        return Err(Error::dim(op, Axis::Channel, expected.c, found.c));
    }
    if expected.h != found.h {
        return Err(Error::dim(op, Axis::Height, expected.h, found.h));
    }
    if expected.w != found.w {
        return Err(Error::dim(op, Axis::Width, expected.w, found.w));
    }
    Ok(())
}

pub(crate) fn check_same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a.n != b.n {
        return Err(Error::dim(op, Axis::Batch, a.n, b.n));
    }
    check_item_shape(op, a, b)
}
