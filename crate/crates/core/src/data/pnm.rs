use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use std::collections::BTreeMap;
use std::path::Path;

/// 8-bit binary PGM (P5, one channel) or PPM (P6, interleaved RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl PnmImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Data(format!("invalid image geometry {width}x{height}x{channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Data(format!(
                "image data has {} bytes, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        Ok(PnmImage { width, height, channels, pixels })
    }
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Data("PNM header ends early".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Data(format!("PNM header: expected a number at byte {start}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| Error::Data("PNM header number out of range".into()))
}

pub fn parse_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Data("not a binary PGM/PPM (magic must be P5 or P6)".into())),
    };
    let mut pos = 2;
    let width = header_token(bytes, &mut pos)?;
    let height = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Data(format!("PNM maxval {maxval} unsupported (only 255)")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Data("PNM header must end with one whitespace byte".into()));
    }
    PnmImage::new(width, height, channels, bytes[pos + 1..].to_vec())
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<PnmImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_pnm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn encode_pnm(img: &PnmImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pnm(path: impl AsRef<Path>, img: &PnmImage) -> Result<()> {
    std::fs::write(path, encode_pnm(img))?;
    Ok(())
}

/// Nearest-neighbour resize: target pixel `(y, x)` copies source `(⌊y·H/h⌋, ⌊x·W/w⌋)`.
pub fn resize_nearest(img: &PnmImage, width: usize, height: usize) -> PnmImage {
    let ch = img.channels;
    let mut pixels = Vec::with_capacity(width * height * ch);
    for y in 0..height {
        let sy = y * img.height / height;
        for x in 0..width {
            let sx = x * img.width / width;
            let at = (sy * img.width + sx) * ch;
            pixels.extend_from_slice(&img.pixels[at..at + ch]);
        }
    }
    PnmImage { width, height, channels: ch, pixels }
}

/// Pairs `<stem>.ppm` images with `<stem>.pgm` masks in `dir`, resized to
/// `size × size`; mask bytes ≥ 128 become 1. Pairs are ordered by stem.
pub fn load_segmentation_pairs(dir: impl AsRef<Path>, size: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    if size == 0 {
        return Err(Error::Config("segmentation image size must be >= 1".into()));
    }
    let mut pairs: BTreeMap<String, (Option<std::path::PathBuf>, Option<std::path::PathBuf>)> = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else { continue };
        let stem = stem.to_string_lossy().into_owned();
        match ext.to_str() {
            Some("ppm") => pairs.entry(stem).or_default().0 = Some(path),
            Some("pgm") => pairs.entry(stem).or_default().1 = Some(path),
            _ => {}
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{}: no .ppm/.pgm pairs", dir.display())));
    }
    let n = pairs.len();
    let plane = size * size;
    let mut images = vec![0.0; n * 3 * plane];
    let mut masks = Vec::with_capacity(n * plane);
    for (i, (stem, files)) in pairs.into_iter().enumerate() {
        let (Some(img_path), Some(mask_path)) = files else {
            return Err(Error::Data(format!("unpaired file for '{stem}' in {}", dir.display())));
        };
        let img = read_pnm(&img_path)?;
        let mask = read_pnm(&mask_path)?;
        if img.channels != 3 || mask.channels != 1 {
            return Err(Error::Data(format!("'{stem}': expected an RGB .ppm image and a grey .pgm mask")));
        }
        let img = resize_nearest(&img, size, size);
        let mask = resize_nearest(&mask, size, size);
        let item = &mut images[i * 3 * plane..(i + 1) * 3 * plane];
        for (p, rgb) in img.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                item[c * plane + p] = rgb[c] as f64 / 255.0;
            }
        }
        masks.extend(mask.pixels.iter().map(|&v| u8::from(v >= 128)));
    }
    Dataset::new(Tensor::from_parts(Shape::new(n, 3, size, size), images), Targets::Masks(masks))
}

/// Entropy values scaled linearly from `[0, ln 2]` to bytes, rounding half up.
pub fn uncertainty_map_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v / std::f64::consts::LN_2 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes item `index` of an `N×1×H×W` entropy map as a P5 PGM.
pub fn emit_uncertainty_map(path: impl AsRef<Path>, entropy: &Tensor, index: usize) -> Result<()> {
    let s = entropy.shape();
    if s.c != 1 || index >= s.n {
        return Err(Error::InvalidShape(format!("entropy map {:?} has no single-channel item {index}", s.dims())));
    }
    let img = PnmImage::new(s.w, s.h, 1, uncertainty_map_bytes(entropy.item(index)))?;
    write_pnm(path, &img)
}
