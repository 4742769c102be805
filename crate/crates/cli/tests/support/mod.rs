//! Deterministic fixtures: a CIFAR-format two-class image set, a PPM/PGM
//! segmentation directory, and experiment configs pointing at them.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use smcdo::data::{encode_cifar10, encode_pnm, Cifar10Record, PnmImage, CIFAR10_PIXELS};
use std::path::{Path, PathBuf};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A 32×32 RGB grating whose orientation depends on the class (around 0° for
/// class 0 and 90° for class 1, 22° spread, so the classes overlap slightly),
/// with random colour, frequency, contrast, an optional occluding disc and pixel noise.
pub fn grating_image(label: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let centre = if label == 0 { 0.0 } else { 90.0 };
    let theta = (centre + 22.0 * normal(rng)).to_radians();
    let freq = rng.random_range(0.5..1.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.08..0.3);
    let bg: [f64; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let tint: [f64; 3] = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
    let disc = rng.random_bool(0.5).then(|| {
        (
            rng.random_range(0.0..32.0),
            rng.random_range(0.0..32.0),
            rng.random_range(3.0..8.0),
            [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()],
        )
    });
    let mut pixels = vec![0u8; CIFAR10_PIXELS];
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = bg[c] + amp * tint[c] * (freq * (xf * theta.cos() + yf * theta.sin()) + phase).sin();
                if let Some((cx, cy, r, col)) = disc {
                    if (xf - cx).powi(2) + (yf - cy).powi(2) <= r * r {
                        v = col[c];
                    }
                }
                v += 0.04 * normal(rng);
                pixels[c * 1024 + y * 32 + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    pixels
}

/// `n` records with alternating labels 0/1 in CIFAR-10 binary layout.
pub fn synthetic_cifar_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<Cifar10Record> = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            Cifar10Record { label, pixels: grating_image(label, &mut rng) }
        })
        .collect();
    encode_cifar10(&records).unwrap()
}

/// A 32×32 RGB scene: a smooth random colour field as clutter, and an
/// elliptical object carrying a fine grating whose orientation depends on the
/// class (around 0° or 90°, 25° spread). The grating period is 3–5 px and its
/// contrast is low, so the class evidence is a fragile texture cue much like
/// the high-frequency cues natural-image classifiers lean on.
pub fn textured_image(label: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    use std::f64::consts::TAU;
    let centre = if label == 0 { 0.0 } else { 90.0 };
    let theta = (centre + 25.0 * normal(rng)).to_radians();
    let freq = rng.random_range(1.3..2.1);
    let phase = rng.random_range(0.0..TAU);
    let amp = rng.random_range(0.05..0.2);
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let a = rng.random_range(0.0..TAU);
            let f = rng.random_range(0.05..0.3);
            let ph = rng.random_range(0.0..TAU);
            (a, f, ph, [rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12)])
        })
        .collect();
    let bg: [f64; 3] = [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)];
    let obj: [f64; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let (cx, cy) = (rng.random_range(10.0..22.0), rng.random_range(10.0..22.0));
    let (rx, ry) = (rng.random_range(7.0..13.0), rng.random_range(7.0..13.0));
    let mut pixels = vec![0u8; CIFAR10_PIXELS];
    for y in 0..32 {
        for x in 0..32 {
            let (xf, yf) = (x as f64, y as f64);
            let inside = ((xf - cx) / rx).powi(2) + ((yf - cy) / ry).powi(2) <= 1.0;
            let stripe = (freq * (xf * theta.cos() + yf * theta.sin()) + phase).sin();
            for c in 0..3 {
                let mut v = if inside {
                    obj[c] + amp * stripe
                } else {
                    bg[c] + waves.iter().map(|(a, f, ph, col)| col[c] * (f * (xf * a.cos() + yf * a.sin()) + ph).sin()).sum::<f64>()
                };
                v += 0.03 * normal(rng);
                pixels[c * 1024 + y * 32 + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    pixels
}

/// As [`synthetic_cifar_bytes`] with [`textured_image`] scenes.
pub fn textured_cifar_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<Cifar10Record> = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            Cifar10Record { label, pixels: textured_image(label, &mut rng) }
        })
        .collect();
    encode_cifar10(&records).unwrap()
}

pub fn write_synthetic_cifar(path: &Path, n: usize, seed: u64) {
    std::fs::write(path, synthetic_cifar_bytes(n, seed)).unwrap();
}

/// Pairs of noisy images with one bright disc each; the mask marks the disc.
pub fn write_segmentation_dir(dir: &Path, n: usize, size: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let s = size as f64;
        let (cx, cy, r) = (rng.random_range(0.3 * s..0.7 * s), rng.random_range(0.3 * s..0.7 * s), rng.random_range(0.12 * s..0.25 * s));
        let mut rgb = Vec::with_capacity(3 * size * size);
        let mut mask = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let inside = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r;
                let base = if inside { 0.75 } else { 0.3 };
                for _ in 0..3 {
                    rgb.push(((base + 0.08 * normal(&mut rng)).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
                mask.push(if inside { 255 } else { 0 });
            }
        }
        let img = PnmImage::new(size, size, 3, rgb).unwrap();
        let m = PnmImage::new(size, size, 1, mask).unwrap();
        std::fs::write(dir.join(format!("sample{i:03}.ppm")), encode_pnm(&img)).unwrap();
        std::fs::write(dir.join(format!("sample{i:03}.pgm")), encode_pnm(&m)).unwrap();
    }
}

/// Small two-class classification experiment rooted at `dir`.
pub fn classification_config(dir: &Path) -> Value {
    let train = dir.join("train.bin");
    let test = dir.join("test.bin");
    if !train.exists() {
        write_synthetic_cifar(&train, 48, 1);
        write_synthetic_cifar(&test, 24, 2);
    }
    json!({
        "arch": {
            "family": "mini_wrn",
            "depth_blocks": 1,
            "widening_factor": 1,
            "base_channels": 4,
            "first_stochastic_layer": 5,
            "num_classes": 2
        },
        "train": {
            "epochs": 2,
            "lr_milestones": [[1, 0.05], [2, 0.005]],
            "momentum": 0.9,
            "weight_decay": 0.0005,
            "batch_size": 16,
            "augmentation": {"pad_crop": 2, "horizontal_flip": true},
            "rate_train": 0.1,
            "seed": 7
        },
        "eval": {
            "m": 3,
            "rate_inf": [0.1, 0.3],
            "corruptions": {"kinds": ["gaussian_noise", "contrast"], "levels": [4]},
            "batch_size": 12
        },
        "bench": {"warmup_iters": 1, "timed_iters": 10, "executors": ["vanilla", "mcdo_sequential", "mcdo_branched"]},
        "data": {"kind": "cifar10", "train": ["train.bin"], "test": ["test.bin"], "classes": [0, 1]},
        "output_dir": "out"
    })
}

pub fn segmentation_config(dir: &Path) -> Value {
    let train = dir.join("seg_train");
    if !train.exists() {
        write_segmentation_dir(&train, 6, 20, 3);
        write_segmentation_dir(&dir.join("seg_test"), 3, 20, 4);
    }
    json!({
        "arch": {
            "family": "mini_segnet",
            "depth_blocks": 2,
            "widening_factor": 1,
            "base_channels": 4,
            "first_stochastic_layer": 3,
            "num_classes": 2
        },
        "train": {
            "epochs": 2,
            "lr_milestones": [[1, 0.01]],
            "momentum": 0.9,
            "weight_decay": 0.0,
            "batch_size": 3,
            "rate_train": 0.1,
            "seed": 1,
            "optimizer": "adam",
            "loss": "cross_entropy_dice"
        },
        "eval": {"m": 2, "rate_inf": [0.2], "maps": 2},
        "data": {"kind": "segmentation", "train": ["seg_train"], "test": ["seg_test"], "image_size": 16},
        "output_dir": "seg_out"
    })
}

pub fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}
