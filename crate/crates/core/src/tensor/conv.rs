use super::{Shape, Tensor};
use crate::error::{Axis, Error, Result};

/// Convolution kernel, bias and geometry. Weights are stored O×I×kH×kW.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(
        dims: [usize; 4],
        weights: Vec<f64>,
        bias: Vec<f64>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let p = ConvParams {
            out_channels: dims[0],
            in_channels: dims[1],
            kernel_h: dims[2],
            kernel_w: dims[3],
            weights,
            bias,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(dims: [usize; 4], stride: usize, padding: usize) -> Self {
        let len = dims.iter().product();
        ConvParams {
            out_channels: dims[0],
            in_channels: dims[1],
            kernel_h: dims[2],
            kernel_w: dims[3],
            weights: vec![0.0; len],
            bias: vec![0.0; dims[0]],
            stride,
            padding,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Length of one output channel's filter (I·kH·kW).
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn validate(&self) -> Result<()> {
        let [o, i, kh, kw] = self.dims();
        if o == 0 || i == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidShape(format!("conv kernel dims {:?}", self.dims())));
        }
        if self.stride == 0 {
            return Err(Error::InvalidShape("conv stride must be positive".into()));
        }
        if self.weights.len() != o * i * kh * kw {
            return Err(Error::dim("conv2d", Axis::Length, o * i * kh * kw, self.weights.len()));
        }
        if self.bias.len() != o {
            return Err(Error::dim("conv2d", Axis::Channel, o, self.bias.len()));
        }
        Ok(())
    }

    /// Output shape for `input`, checking channel count and spatial arithmetic.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::dim("conv2d", Axis::Channel, self.in_channels, input.c));
        }
        let out_h = out_extent(input.h, self.kernel_h, self.stride, self.padding)
            .ok_or_else(|| Error::dim("conv2d", Axis::Height, self.kernel_h, input.h + 2 * self.padding))?;
        let out_w = out_extent(input.w, self.kernel_w, self.stride, self.padding)
            .ok_or_else(|| Error::dim("conv2d", Axis::Width, self.kernel_w, input.w + 2 * self.padding))?;
        Ok(Shape::new(input.n, self.out_channels, out_h, out_w))
    }

    /// Kernel restricted to the given input channels, in order.
    pub fn select_input_channels(&self, channels: &[usize]) -> ConvParams {
        let k = self.kernel_h * self.kernel_w;
        let mut weights = Vec::with_capacity(self.out_channels * channels.len() * k);
        for o in 0..self.out_channels {
            let filter = &self.weights[o * self.filter_len()..(o + 1) * self.filter_len()];
            for &c in channels {
                weights.extend_from_slice(&filter[c * k..(c + 1) * k]);
            }
        }
        ConvParams {
            out_channels: self.out_channels,
            in_channels: channels.len(),
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            weights,
            bias: self.bias.clone(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Unfolds one image (C×H×W slice) into a (C·kH·kW)×(H'·W') column matrix.
pub fn im2col(image: &[f64], in_shape: Shape, params: &ConvParams, out_h: usize, out_w: usize) -> Vec<f64> {
    let (kh, kw) = (params.kernel_h, params.kernel_w);
    let (h, w) = (in_shape.h as isize, in_shape.w as isize);
    let cols = out_h * out_w;
    let mut out = vec![0.0; in_shape.c * kh * kw * cols];
    let pad = params.padding as isize;
    let stride = params.stride as isize;
    for c in 0..in_shape.c {
        let plane = &image[c * in_shape.plane()..(c + 1) * in_shape.plane()];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..out_h {
                    let iy = oy as isize * stride + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src_row = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    for ox in 0..out_w {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[oy * out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-adds a column matrix back onto an image (adjoint of `im2col`).
fn col2im(cols: &[f64], in_shape: Shape, params: &ConvParams, out_h: usize, out_w: usize, image: &mut [f64]) {
    let (kh, kw) = (params.kernel_h, params.kernel_w);
    let (h, w) = (in_shape.h as isize, in_shape.w as isize);
    let ncols = out_h * out_w;
    let pad = params.padding as isize;
    let stride = params.stride as isize;
    for c in 0..in_shape.c {
        let plane = &mut image[c * in_shape.plane()..(c + 1) * in_shape.plane()];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..out_h {
                    let iy = oy as isize * stride + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            plane[(iy * w + ix) as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c (m×n) = a (m×k) · b (k×n) + beta · c`, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the row-major (optionally transposed)
    // layouts of slices whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation with symmetric zero padding (im2col + GEMM per image).
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let in_shape = input.shape();
    let out_shape = params.output_shape(in_shape)?;
    let (out_h, out_w) = (out_shape.h, out_shape.w);
    let pixels = out_h * out_w;
    let flen = params.filter_len();
    let mut out = vec![0.0; out_shape.len()];
    for n in 0..in_shape.n {
        let cols = im2col(input.item(n), in_shape, params, out_h, out_w);
        let dst = &mut out[n * out_shape.item_len()..(n + 1) * out_shape.item_len()];
        for (o, row) in dst.chunks_exact_mut(pixels).enumerate() {
            row.fill(params.bias[o]);
        }
        gemm(params.out_channels, flen, pixels, &params.weights, false, &cols, false, 1.0, dst);
    }
    Ok(Tensor::from_parts(out_shape, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of `conv2d` w.r.t. its input, weights and bias.
pub fn conv2d_backward(input: &Tensor, params: &ConvParams, grad_output: &Tensor) -> Result<(Tensor, ConvGrads)> {
    let in_shape = input.shape();
    let out_shape = params.output_shape(in_shape)?;
    super::check_same_shape("conv2d_backward", out_shape, grad_output.shape())?;
    let (out_h, out_w) = (out_shape.h, out_shape.w);
    let pixels = out_h * out_w;
    let flen = params.filter_len();
    let mut grad_in = vec![0.0; in_shape.len()];
    let mut grad_w = vec![0.0; params.weights.len()];
    let mut grad_b = vec![0.0; params.out_channels];
    let mut grad_cols = vec![0.0; flen * pixels];
    for n in 0..in_shape.n {
        let g = grad_output.item(n);
        for (o, row) in g.chunks_exact(pixels).enumerate() {
            grad_b[o] += row.iter().sum::<f64>();
        }
        let cols = im2col(input.item(n), in_shape, params, out_h, out_w);
        // dW += G · colsᵀ
        gemm(params.out_channels, pixels, flen, g, false, &cols, true, 1.0, &mut grad_w);
        // dcols = Wᵀ · G
        gemm(flen, params.out_channels, pixels, &params.weights, true, g, false, 0.0, &mut grad_cols);
        let item = in_shape.item_len();
        col2im(&grad_cols, in_shape, params, out_h, out_w, &mut grad_in[n * item..(n + 1) * item]);
    }
    Ok((
        Tensor::from_parts(in_shape, grad_in),
        ConvGrads {
            weights: grad_w,
            bias: grad_b,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop cross-correlation used as the reference.
    fn conv2d_naive(x: &Tensor, p: &ConvParams) -> Tensor {
        let s = x.shape();
        let os = p.output_shape(s).unwrap();
        let mut out = Tensor::zeros(os);
        for n in 0..s.n {
            for o in 0..p.out_channels {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut acc = p.bias[o];
                        for c in 0..s.c {
                            for ky in 0..p.kernel_h {
                                for kx in 0..p.kernel_w {
                                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                        continue;
                                    }
                                    let wi = ((o * s.c + c) * p.kernel_h + ky) * p.kernel_w + kx;
                                    acc += p.weights[wi] * x.at(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                        let idx = out.index(n, o, oy, ox);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Tensor, ConvParams) {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..5);
        let o = rng.random_range(1..5);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..2);
        let h = rng.random_range(k..k + 5);
        let w = rng.random_range(k..k + 5);
        let x = Tensor::from_dims([n, c, h, w], (0..n * c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let p = ConvParams::new(
            [o, c, k, k],
            (0..o * c * k * k).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..o).map(|_| rng.random_range(-1.0..1.0)).collect(),
            stride,
            padding,
        )
        .unwrap();
        (x, p)
    }

    #[test]
    fn unit_kernel_scales() {
        let x = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
        let p = ConvParams::new([1, 1, 1, 1], vec![2.0], vec![0.0], 1, 0).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::zeros(Shape::new(2, 3, 4, 4));
        let p = ConvParams::new([2, 3, 3, 3], vec![0.7; 54], vec![1.5, -0.25], 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 1.5));
            assert!(y.plane(n, 1).iter().all(|&v| v == -0.25));
        }
    }

    #[test]
    fn identity_diagonal_kernel() {
        let x = Tensor::from_dims([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = ConvParams::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0], vec![0.0], 1, 0).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(conv2d_naive(&x, &p).data(), &[5.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (x, p) = random_case(&mut rng);
            let fast = conv2d(&x, &p).unwrap();
            let slow = conv2d_naive(&x, &p);
            assert!(fast.max_abs_diff(&slow) <= 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::zeros(Shape::new(1, 2, 3, 3));
        let p = ConvParams::zeros([1, 3, 1, 1], 1, 0);
        match conv2d(&x, &p).unwrap_err() {
            Error::Dimension { axis, expected, found, .. } => {
                assert_eq!((axis, expected, found), (Axis::Channel, 3, 2));
            }
            e => panic!("unexpected {e}"),
        }
        let small = Tensor::zeros(Shape::new(1, 3, 2, 2));
        let big = ConvParams::zeros([1, 3, 3, 3], 1, 0);
        assert!(matches!(conv2d(&small, &big).unwrap_err(), Error::Dimension { axis: Axis::Height, .. }));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_dims([1, 2, 4, 4], (0..32).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let p = ConvParams::new(
            [3, 2, 3, 3],
            (0..54).map(|_| rng.random_range(-2.0..2.0)).collect(),
            vec![0.1, -0.2, 0.3],
            1,
            1,
        )
        .unwrap();
        let g = Tensor::from_dims([1, 3, 4, 4], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (gx, gp) = conv2d_backward(&x, &p, &g).unwrap();
        let objective = |x: &Tensor, p: &ConvParams| -> f64 {
            conv2d(x, p).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp, &p) - objective(&xm, &p)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "input {i}");
        }
        for i in 0..p.weights.len() {
            let mut pp = p.clone();
            pp.weights[i] += h;
            let mut pm = p.clone();
            pm.weights[i] -= h;
            let fd = (objective(&x, &pp) - objective(&x, &pm)) / (2.0 * h);
            assert!((fd - gp.weights[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "weight {i}");
        }
        let bias_sum: Vec<f64> = (0..3).map(|o| g.plane(0, o).iter().sum()).collect();
        for (a, b) in bias_sum.iter().zip(&gp.bias) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
