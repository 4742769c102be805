//! Desk-scale architecture builders: a small wide residual network and a
//! small encoder–decoder segmentation network.

use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph};
use crate::stochastic::DropoutSpec;
use crate::tensor::serialize::LayerWeights;
use crate::tensor::{BatchNormParams, ConvParams, DenseParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchFamily {
    MiniWrn,
    MiniSegnet,
}

fn default_in_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub family: ArchFamily,
    /// Residual blocks per stage (mini_wrn) or down/up-sampling levels (mini_segnet).
    pub depth_blocks: usize,
    pub widening_factor: usize,
    pub base_channels: usize,
    /// Conv index (main path, 0-based, shortcuts excluded) from which every conv gets a dropout-site.
    pub first_stochastic_layer: usize,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widening_factor < 1 {
            return Err(Error::Config("widening_factor must be >= 1".into()));
        }
        if self.depth_blocks < 1 || self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::Config("depth_blocks, base_channels and in_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.family == ArchFamily::MiniSegnet && self.first_stochastic_layer < self.depth_blocks + 1 {
            return Err(Error::Config(format!(
                "mini_segnet dropout must start in the decoder (conv index >= {})",
                self.depth_blocks + 1
            )));
        }
        Ok(())
    }

    /// Main-path conv count of the built network.
    pub fn conv_count(&self) -> usize {
        match self.family {
            ArchFamily::MiniWrn => 1 + 3 * 2 * self.depth_blocks,
            ArchFamily::MiniSegnet => 2 * self.depth_blocks + 2,
        }
    }

    /// Input side length must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        match self.family {
            ArchFamily::MiniWrn => 4,
            ArchFamily::MiniSegnet => 1 << self.depth_blocks,
        }
    }
}

struct Builder {
    layers: Vec<Layer>,
    params: Vec<LayerWeights>,
    conv_index: usize,
    first_stochastic: usize,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(first_stochastic: usize, seed: u64) -> Self {
        Builder {
            layers: Vec::new(),
            params: Vec::new(),
            conv_index: 0,
            first_stochastic,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal initialised conv record.
    fn conv_record(&mut self, out_c: usize, in_c: usize, k: usize, stride: usize) -> usize {
        let fan_in = (in_c * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weights = (0..out_c * in_c * k * k).map(|_| normal.sample(&mut self.rng)).collect();
        let p = ConvParams::new([out_c, in_c, k, k], weights, vec![0.0; out_c], stride, k / 2).expect("valid dims");
        self.params.push(LayerWeights::Conv(p));
        self.params.len() - 1
    }

    /// Main-path conv, preceded by a dropout-site when its index is stochastic.
    fn conv(&mut self, out_c: usize, in_c: usize, k: usize, stride: usize) {
        if self.conv_index >= self.first_stochastic {
            self.layers.push(Layer::DropoutSite);
        }
        self.conv_index += 1;
        let param = self.conv_record(out_c, in_c, k, stride);
        self.layers.push(Layer::Conv { param });
    }

    fn bn_relu(&mut self, channels: usize) {
        self.params.push(LayerWeights::BatchNorm(BatchNormParams::identity(channels, BN_EPSILON)));
        self.layers.push(Layer::BatchNorm { param: self.params.len() - 1 });
        self.layers.push(Layer::Relu);
    }

    fn dense(&mut self, out_f: usize, in_f: usize) {
        let bound = (6.0 / (in_f + out_f) as f64).sqrt();
        let uniform = Uniform::new(-bound, bound).expect("bound > 0");
        let weights = (0..out_f * in_f).map(|_| uniform.sample(&mut self.rng)).collect();
        self.params.push(LayerWeights::Dense(DenseParams::new(out_f, in_f, weights, vec![0.0; out_f]).expect("dims")));
        self.layers.push(Layer::Dense { param: self.params.len() - 1 });
    }

    fn finish(self, dropout: DropoutSpec) -> Result<ModelGraph> {
        ModelGraph::new(self.layers, self.params, dropout)
    }
}

/// Residual stack of three stages (widths `base·k`, `2·base·k`, `4·base·k`,
/// the last two entered with stride 2) behind a `base`-wide stem, followed by
/// global average pooling, a dense layer and softmax.
pub fn build_mini_wrn(arch: &ArchConfig, dropout: DropoutSpec, init_seed: u64) -> Result<ModelGraph> {
    arch.validate()?;
    if arch.family != ArchFamily::MiniWrn {
        return Err(Error::Config("build_mini_wrn needs family mini_wrn".into()));
    }
    let mut b = Builder::new(arch.first_stochastic_layer, init_seed);
    let stem = arch.base_channels;
    b.conv(stem, arch.in_channels, 3, 1);
    b.bn_relu(stem);
    let mut in_c = stem;
    for stage in 0..3 {
        let width = (arch.base_channels * arch.widening_factor) << stage;
        for block in 0..arch.depth_blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            b.layers.push(Layer::ResidualBegin);
            b.conv(width, in_c, 3, stride);
            b.bn_relu(width);
            b.conv(width, width, 3, 1);
            b.params.push(LayerWeights::BatchNorm(BatchNormParams::identity(width, BN_EPSILON)));
            b.layers.push(Layer::BatchNorm { param: b.params.len() - 1 });
            let shortcut = (stride != 1 || in_c != width).then(|| b.conv_record(width, in_c, 1, stride));
            b.layers.push(Layer::ResidualEnd { shortcut });
            b.layers.push(Layer::Relu);
            in_c = width;
        }
    }
    b.layers.push(Layer::GlobalAvgPool);
    b.dense(arch.num_classes, in_c);
    b.layers.push(Layer::Softmax);
    b.finish(dropout)
}

/// Max-pool encoder and nearest-upsample decoder with a per-pixel softmax.
/// Dropout-sites can only appear in the decoder.
pub fn build_mini_segnet(arch: &ArchConfig, dropout: DropoutSpec, init_seed: u64) -> Result<ModelGraph> {
    arch.validate()?;
    if arch.family != ArchFamily::MiniSegnet {
        return Err(Error::Config("build_mini_segnet needs family mini_segnet".into()));
    }
    let levels = arch.depth_blocks;
    let width = |l: usize| (arch.base_channels * arch.widening_factor) << l;
    let mut b = Builder::new(arch.first_stochastic_layer, init_seed);
    b.conv(width(0), arch.in_channels, 3, 1);
    b.bn_relu(width(0));
    for l in 1..=levels {
        b.layers.push(Layer::MaxPool { window: 2, stride: 2 });
        b.conv(width(l), width(l - 1), 3, 1);
        b.bn_relu(width(l));
    }
    for l in (1..=levels).rev() {
        b.layers.push(Layer::Upsample { factor: 2 });
        b.conv(width(l - 1), width(l), 3, 1);
        b.bn_relu(width(l - 1));
    }
    b.conv(arch.num_classes, width(0), 1, 1);
    b.layers.push(Layer::Softmax);
    b.finish(dropout)
}

pub fn build(arch: &ArchConfig, dropout: DropoutSpec, init_seed: u64) -> Result<ModelGraph> {
    match arch.family {
        ArchFamily::MiniWrn => build_mini_wrn(arch, dropout, init_seed),
        ArchFamily::MiniSegnet => build_mini_segnet(arch, dropout, init_seed),
    }
}
