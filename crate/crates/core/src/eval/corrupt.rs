use crate::error::{Error, Result};
use crate::stochastic::MaskSeed;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Severity parameter per level 1..=5: noise σ, blur σ, brightness shift,
    /// contrast scale, pixelate downscale factor.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.16, 0.20],
            CorruptionKind::GaussianBlur => [0.5, 1.0, 1.5, 2.0, 2.5],
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
            CorruptionKind::Contrast => [0.85, 0.7, 0.55, 0.4, 0.3],
            CorruptionKind::Pixelate => [1.25, 1.5, 2.0, 3.0, 4.0],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub level: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, level: u8) -> Result<Self> {
        if !(1..=5).contains(&level) {
            return Err(Error::Config(format!("corruption level {level} outside 1..5")));
        }
        Ok(CorruptionSpec { kind, level })
    }

    pub fn severity(&self) -> f64 {
        self.kind.table()[self.level as usize - 1]
    }

    /// `"<kind>-<level>"`, e.g. `"contrast-3"`.
    pub fn id(&self) -> String {
        format!("{}-{}", self.kind, self.level)
    }
}

/// Applies a corruption to every image of a `[0,1]` batch; the result is clipped to `[0,1]`.
///
/// Noise for image `n` is drawn from `MaskSeed(seed, n, 0)`, so a batch and its
/// individual items corrupt identically.
pub fn corrupt(images: &Tensor, spec: CorruptionSpec, seed: u64) -> Result<Tensor> {
    CorruptionSpec::new(spec.kind, spec.level)?;
    let mut out = corrupt_unclipped(images, spec, seed);
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

fn corrupt_unclipped(images: &Tensor, spec: CorruptionSpec, seed: u64) -> Tensor {
    let s = images.shape();
    let sev = spec.severity();
    let mut out = images.clone();
    let item_len = s.item_len();
    for (n, item) in out.data_mut().chunks_mut(item_len).enumerate() {
        match spec.kind {
            CorruptionKind::GaussianNoise => {
                let mut rng = MaskSeed::new(seed, n, 0).rng();
                for v in item.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += sev * z;
                }
            }
            CorruptionKind::Brightness => item.iter_mut().for_each(|v| *v += sev),
            CorruptionKind::Contrast => scale_contrast(item, sev),
            CorruptionKind::GaussianBlur => {
                for plane in item.chunks_mut(s.plane()) {
                    gaussian_blur_plane(plane, s.h, s.w, sev);
                }
            }
            CorruptionKind::Pixelate => {
                for plane in item.chunks_mut(s.plane()) {
                    pixelate_plane(plane, s.h, s.w, sev);
                }
            }
        }
    }
    out
}

/// Scales deviations from the image mean (all channels pooled).
fn scale_contrast(item: &mut [f64], scale: f64) {
    let mean = item.iter().sum::<f64>() / item.len() as f64;
    item.iter_mut().for_each(|v| *v = (*v - mean) * scale + mean);
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable blur with edge replication.
fn gaussian_blur_plane(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * plane[y * w + clampi(x as isize + j as isize - r, w)]).sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * tmp[clampi(y as isize + j as isize - r, h) * w + x]).sum();
        }
    }
}

/// Box-average down to `round(side / factor)` cells per axis, then nearest upsample.
fn pixelate_plane(plane: &mut [f64], h: usize, w: usize, factor: f64) {
    let sh = ((h as f64 / factor).round() as usize).clamp(1, h);
    let sw = ((w as f64 / factor).round() as usize).clamp(1, w);
    let cell = |y: usize, x: usize| (y * sh / h) * sw + x * sw / w;
    let mut sums = vec![0.0; sh * sw];
    let mut counts = vec![0usize; sh * sw];
    for y in 0..h {
        for x in 0..w {
            sums[cell(y, x)] += plane[y * w + x];
            counts[cell(y, x)] += 1;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let c = cell(y, x);
            plane[y * w + x] = sums[c] / counts[c] as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..n * 3 {
            let (fy, fx, ph) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6), rng.random_range(0.0..6.0));
            for y in 0..16 {
                for x in 0..16 {
                    data.push(0.5 + 0.4 * ((fy * y as f64 + fx * x as f64 + ph) as f64).sin());
                }
            }
        }
        Tensor::from_dims([n, 3, 16, 16], data).unwrap()
    }

    #[test]
    fn tables_are_strictly_monotone() {
        for kind in CorruptionKind::ALL {
            let t = kind.table();
            let increasing = t.windows(2).all(|w| w[1] > w[0]);
            let decreasing = t.windows(2).all(|w| w[1] < w[0]);
            assert!(increasing || decreasing, "{kind}");
        }
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6).is_err());
    }

    #[test]
    fn noise_std_matches_table() {
        let img = Tensor::filled(Shape::new(1, 1, 1000, 1000), 0.5);
        for level in 1..=5 {
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, level).unwrap();
            let noisy = corrupt_unclipped(&img, spec, 11);
            let n = noisy.data().len() as f64;
            let mean = noisy.data().iter().map(|v| v - 0.5).sum::<f64>() / n;
            let var = noisy.data().iter().map(|v| (v - 0.5 - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            assert!((sd / spec.severity() - 1.0).abs() < 0.05, "level {level}: {sd}");
        }
    }

    #[test]
    fn brightness_on_black() {
        let black = Tensor::zeros(Shape::new(2, 3, 4, 4));
        let out = corrupt(&black, CorruptionSpec::new(CorruptionKind::Brightness, 1).unwrap(), 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.05));
    }

    #[test]
    fn contrast_reduces_variance() {
        let img = smooth_images(1, 2);
        let var = |t: &Tensor| {
            let m = t.data().iter().sum::<f64>() / t.data().len() as f64;
            t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>()
        };
        let mut prev = var(&img);
        let unit = CorruptionSpec { kind: CorruptionKind::Contrast, level: 1 };
        let mut same = img.data().to_vec();
        scale_contrast(&mut same, 1.0);
        assert!(same.iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-15));
        for level in 1..=5 {
            let out = corrupt(&img, CorruptionSpec { level, ..unit }, 0).unwrap();
            let v = var(&out);
            assert!(v < prev, "level {level}");
            prev = v;
        }
    }

    #[test]
    fn deterministic_clipped_and_severity_monotone() {
        let imgs = smooth_images(4, 5);
        for kind in CorruptionKind::ALL {
            let mut prev = 0.0;
            for level in 1..=5 {
                let spec = CorruptionSpec::new(kind, level).unwrap();
                let a = corrupt(&imgs, spec, 9).unwrap();
                assert_eq!(a, corrupt(&imgs, spec, 9).unwrap());
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
                let mad = a.data().iter().zip(imgs.data()).map(|(x, y)| (x - y).abs()).sum::<f64>();
                assert!(mad >= prev, "{kind} level {level}");
                prev = mad;
            }
        }
    }

    #[test]
    fn blur_preserves_constant_and_pixelate_blocks() {
        let flat = Tensor::filled(Shape::new(1, 1, 8, 8), 0.3);
        let out = corrupt(&flat, CorruptionSpec::new(CorruptionKind::GaussianBlur, 5).unwrap(), 0).unwrap();
        assert!(out.max_abs_diff(&flat) < 1e-12);
        let ramp = Tensor::from_dims([1, 1, 1, 8], (0..8).map(|v| v as f64 / 8.0).collect()).unwrap();
        let out = corrupt(&ramp, CorruptionSpec::new(CorruptionKind::Pixelate, 5).unwrap(), 0).unwrap();
        // factor 4 on width 8: two cells of four
        assert_eq!(out.data(), &[0.1875, 0.1875, 0.1875, 0.1875, 0.6875, 0.6875, 0.6875, 0.6875]);
    }
}
