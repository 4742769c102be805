//! Dropout masks (spatial and element-wise), inverted-scaling application and
//! the fused dropout–convolution path that only touches kept channels.
//!
//! Every random draw is a pure function of a [`MaskSeed`], so the sequential
//! and branched executors reproduce identical masks.

use crate::error::{Axis, Error, Result};
use crate::tensor::{conv2d, ConvParams, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MAX_RATE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Whole channels dropped, constant across spatial positions.
    Spatial,
    /// Independent per activation.
    Element,
}

/// Kept activations are multiplied by `1 / (1 - rate)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    #[default]
    Inverted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSpec {
    pub mode: DropoutMode,
    pub rate_train: f64,
    pub rate_inf: f64,
    #[serde(default)]
    pub scaling: Scaling,
}

impl DropoutSpec {
    pub fn spatial(rate_train: f64, rate_inf: f64) -> Result<Self> {
        let spec = DropoutSpec {
            mode: DropoutMode::Spatial,
            rate_train,
            rate_inf,
            scaling: Scaling::Inverted,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate_train)?;
        check_rate(self.rate_inf)
    }

    /// Inference rate strictly above the training rate.
    pub fn is_contrastive(&self) -> bool {
        self.rate_inf > self.rate_train
    }
}

pub fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=MAX_RATE).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    Ok(())
}

pub fn keep_scale(rate: f64) -> f64 {
    1.0 / (1.0 - rate)
}

/// Identifies one mask stream: experiment, branch (MC sample) and layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskSeed {
    pub experiment_seed: u64,
    pub branch_index: u64,
    pub layer_index: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl MaskSeed {
    pub fn new(experiment_seed: u64, branch_index: usize, layer_index: usize) -> Self {
        MaskSeed {
            experiment_seed,
            branch_index: branch_index as u64,
            layer_index: layer_index as u64,
        }
    }

    /// Counter-style hash of the triple.
    pub fn stream_key(&self) -> u64 {
        let a = splitmix64(self.experiment_seed);
        let b = splitmix64(a ^ self.branch_index.wrapping_mul(0xA24B_AED4_963E_E407));
        splitmix64(b ^ self.layer_index.wrapping_mul(0x9FB2_1C65_1E98_DF25))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.stream_key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    kept: Vec<bool>,
    rate: f64,
}

impl ChannelMask {
    pub fn new(kept: Vec<bool>, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        if !kept.iter().any(|&k| k) {
            return Err(Error::InvalidShape("channel mask must keep at least one channel".into()));
        }
        Ok(ChannelMask { kept, rate })
    }

    pub fn all_kept(channels: usize) -> Self {
        assert!(channels > 0);
        ChannelMask {
            kept: vec![true; channels],
            rate: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.kept.iter().enumerate().filter_map(|(i, &k)| k.then_some(i)).collect()
    }

    /// `1` for kept, `0` for dropped, channel 0 first.
    pub fn to_bit_string(&self) -> String {
        self.kept.iter().map(|&k| if k { '1' } else { '0' }).collect()
    }
}

/// Bernoulli(1 - rate) per channel; an all-dropped draw is redrawn from the same stream.
pub fn sample_spatial_mask(channels: usize, rate: f64, seed: MaskSeed) -> Result<ChannelMask> {
    check_rate(rate)?;
    if channels == 0 {
        return Err(Error::InvalidShape("mask needs at least one channel".into()));
    }
    let mut rng = seed.rng();
    loop {
        let kept: Vec<bool> = (0..channels).map(|_| rng.random::<f64>() >= rate).collect();
        if kept.iter().any(|&k| k) {
            return Ok(ChannelMask { kept, rate });
        }
    }
}

fn check_mask(op: &'static str, mask: &ChannelMask, channels: usize) -> Result<()> {
    if mask.len() != channels {
        return Err(Error::dim(op, Axis::Channel, channels, mask.len()));
    }
    Ok(())
}

/// Zeroes channels of one batch item in place and rescales the kept ones.
pub(crate) fn spatial_dropout_item(item: &mut [f64], plane: usize, mask: &ChannelMask, rate: f64) {
    let scale = keep_scale(rate);
    for (chunk, &keep) in item.chunks_exact_mut(plane).zip(mask.kept()) {
        if keep {
            chunk.iter_mut().for_each(|v| *v *= scale);
        } else {
            chunk.fill(0.0);
        }
    }
}

/// Applies one channel mask to every item in the batch.
pub fn apply_spatial_dropout(x: &Tensor, mask: &ChannelMask, rate: f64) -> Result<Tensor> {
    check_rate(rate)?;
    let s = x.shape();
    check_mask("apply_spatial_dropout", mask, s.c)?;
    let mut out = x.clone();
    for item in out.data_mut().chunks_exact_mut(s.item_len()) {
        spatial_dropout_item(item, s.plane(), mask, rate);
    }
    Ok(out)
}

/// i.i.d. element dropout; draws are taken in storage order from the seed's stream.
pub fn apply_element_dropout(x: &Tensor, rate: f64, seed: MaskSeed) -> Result<Tensor> {
    check_rate(rate)?;
    let mut out = x.clone();
    element_dropout_in_place(out.data_mut(), rate, seed);
    Ok(out)
}

pub(crate) fn element_dropout_in_place(data: &mut [f64], rate: f64, seed: MaskSeed) {
    if rate == 0.0 {
        return;
    }
    let scale = keep_scale(rate);
    let mut rng = seed.rng();
    for v in data {
        if rng.random::<f64>() >= rate {
            *v *= scale;
        } else {
            *v = 0.0;
        }
    }
}

/// Convolution over the kept channels only: gathers the kept input planes
/// (scaled by `1/(1-rate)`) and the matching kernel input slices.
pub fn fused_dropout_conv(x: &Tensor, params: &ConvParams, mask: &ChannelMask, rate: f64) -> Result<Tensor> {
    check_rate(rate)?;
    let s = x.shape();
    check_mask("fused_dropout_conv", mask, s.c)?;
    if params.in_channels != s.c {
        return Err(Error::dim("fused_dropout_conv", Axis::Channel, params.in_channels, s.c));
    }
    let kept = mask.kept_indices();
    let scale = keep_scale(rate);
    let plane = s.plane();
    let mut gathered = Vec::with_capacity(s.n * kept.len() * plane);
    for n in 0..s.n {
        for &c in &kept {
            gathered.extend(x.plane(n, c).iter().map(|v| v * scale));
        }
    }
    let reduced = Tensor::from_parts(Shape::new(s.n, kept.len(), s.h, s.w), gathered);
    conv2d(&reduced, &params.select_input_channels(&kept))
}

/// Multiply-accumulate count of a convolution; with a mask, only kept input channels count.
pub fn flop_count(params: &ConvParams, input_shape: Shape, mask: Option<&ChannelMask>) -> u64 {
    let extent = |size: usize, k: usize| -> u64 {
        let padded = size + 2 * params.padding;
        if padded < k || params.stride == 0 {
            0
        } else {
            ((padded - k) / params.stride + 1) as u64
        }
    };
    let out_h = extent(input_shape.h, params.kernel_h);
    let out_w = extent(input_shape.w, params.kernel_w);
    let in_channels = mask.map_or(params.in_channels, ChannelMask::kept_count) as u64;
    input_shape.n as u64
        * params.out_channels as u64
        * out_h
        * out_w
        * in_channels
        * params.kernel_h as u64
        * params.kernel_w as u64
}
