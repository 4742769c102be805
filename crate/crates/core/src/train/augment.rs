use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Zero-padding before a random crop back to the original size.
    #[serde(default)]
    pub pad_crop: usize,
    #[serde(default)]
    pub horizontal_flip: bool,
}

/// Crop origin inside the padded image and flip decision for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn identity(config: &AugmentConfig) -> Self {
        AugmentDraw { dy: config.pad_crop, dx: config.pad_crop, flip: false }
    }

    /// Uniform crop origin over `(2·pad+1)²` positions; flip with probability 0.5 when enabled.
    pub fn sample(config: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let span = 2 * config.pad_crop + 1;
        AugmentDraw {
            dy: rng.random_range(0..span),
            dx: rng.random_range(0..span),
            flip: config.horizontal_flip && rng.random_bool(0.5),
        }
    }
}

/// Applies `draw` to every `h×w` plane of `data`, filling outside pixels with zero.
fn transform_planes<T: Copy + Default>(data: &[T], h: usize, w: usize, pad: usize, draw: AugmentDraw) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for (src, dst) in data.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            let sy = y + draw.dy;
            if sy < pad || sy - pad >= h {
                continue;
            }
            for x in 0..w {
                let cx = if draw.flip { w - 1 - x } else { x };
                let sx = cx + draw.dx;
                if sx < pad || sx - pad >= w {
                    continue;
                }
                dst[y * w + x] = src[(sy - pad) * w + sx - pad];
            }
        }
    }
    out
}

/// One image transformed by `draw`.
pub fn apply_draw(item: &[f64], h: usize, w: usize, config: &AugmentConfig, draw: AugmentDraw) -> Vec<f64> {
    transform_planes(item, h, w, config.pad_crop, draw)
}

/// Independent pad-crop / flip draw per example.
pub fn augment(batch: &Tensor, config: &AugmentConfig, rng: &mut impl Rng) -> Tensor {
    augment_inner(batch, None, config, rng).0
}

/// As [`augment`], moving each example's `h×w` mask with its image.
pub fn augment_with_masks(batch: &Tensor, masks: &[u8], config: &AugmentConfig, rng: &mut impl Rng) -> (Tensor, Vec<u8>) {
    augment_inner(batch, Some(masks), config, rng)
}

fn augment_inner(batch: &Tensor, masks: Option<&[u8]>, config: &AugmentConfig, rng: &mut impl Rng) -> (Tensor, Vec<u8>) {
    let s = batch.shape();
    if config.pad_crop == 0 && !config.horizontal_flip {
        return (batch.clone(), masks.map(<[u8]>::to_vec).unwrap_or_default());
    }
    let mut data = Vec::with_capacity(s.len());
    let mut out_masks = Vec::new();
    for n in 0..s.n {
        let draw = AugmentDraw::sample(config, rng);
        data.extend(transform_planes(batch.item(n), s.h, s.w, config.pad_crop, draw));
        if let Some(m) = masks {
            out_masks.extend(transform_planes(&m[n * s.plane()..(n + 1) * s.plane()], s.h, s.w, config.pad_crop, draw));
        }
    }
    (Tensor::new(s, data).expect("same shape"), out_masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn image() -> Tensor {
        Tensor::from_dims([2, 2, 3, 4], (0..48).map(|v| v as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&image(), &AugmentConfig::default(), &mut rng), image());
        let cfg = AugmentConfig { pad_crop: 3, horizontal_flip: true };
        let item = image().item(0).to_vec();
        assert_eq!(apply_draw(&item, 3, 4, &cfg, AugmentDraw::identity(&cfg)), item);
    }

    #[test]
    fn flip_is_an_involution() {
        let cfg = AugmentConfig { pad_crop: 0, horizontal_flip: true };
        let draw = AugmentDraw { dy: 0, dx: 0, flip: true };
        let item = image().item(1).to_vec();
        let once = apply_draw(&item, 3, 4, &cfg, draw);
        assert_eq!(&once[..4], &[28.0, 27.0, 26.0, 25.0]);
        assert_eq!(apply_draw(&once, 3, 4, &cfg, draw), item);
    }

    #[test]
    fn crop_shifts_and_zero_fills() {
        let cfg = AugmentConfig { pad_crop: 1, horizontal_flip: false };
        // origin (0,0) in the padded frame shifts content down-right by one
        let out = apply_draw(&[1.0, 2.0, 3.0, 4.0], 2, 2, &cfg, AugmentDraw { dy: 0, dx: 0, flip: false });
        assert_eq!(out, vec![0.0, 0.0, 0.0, 1.0]);
        let out = apply_draw(&[1.0, 2.0, 3.0, 4.0], 2, 2, &cfg, AugmentDraw { dy: 2, dx: 1, flip: false });
        assert_eq!(out, vec![3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn masks_follow_images() {
        let cfg = AugmentConfig { pad_crop: 2, horizontal_flip: true };
        let img = Tensor::from_dims([3, 1, 4, 4], (0..48).map(|v| (v % 2) as f64).collect()).unwrap();
        let masks: Vec<u8> = (0..48).map(|v| (v % 2) as u8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, m) = augment_with_masks(&img, &masks, &cfg, &mut rng);
        assert!(a.data().iter().zip(&m).all(|(x, y)| *x == *y as f64));
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let cfg = AugmentConfig { pad_crop: 2, horizontal_flip: true };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let span = 5;
        let mut counts = vec![0u32; span * span];
        let mut flips = 0;
        let draws = 10_000;
        for _ in 0..draws {
            let d = AugmentDraw::sample(&cfg, &mut rng);
            counts[d.dy * span + d.dx] += 1;
            flips += u32::from(d.flip);
        }
        let expected = draws as f64 / counts.len() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
        assert!((flips as f64 / draws as f64 - 0.5).abs() < 0.02);
    }
}
