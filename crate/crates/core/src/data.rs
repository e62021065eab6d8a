//! Image and mask ingestion, resizing and augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor4;

pub const TARGET_WIDTH: usize = 640;
pub const TARGET_HEIGHT: usize = 384;

/// A grayscale image in `[0, 1]` (`[1, 1, h, w]`) with its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor4<f32>,
    pub mask: LabelMap,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor4<f32>, mask: LabelMap, id: impl Into<String>) -> Result<Self> {
        let d = image.dims();
        if d.n != 1 || d.c != 1 || (d.h, d.w) != (mask.height(), mask.width()) {
            return Err(Error::ShapeMsg(format!(
                "sample image {d} does not match mask {}x{}",
                mask.height(),
                mask.width()
            )));
        }
        mask.validate()?;
        Ok(Sample {
            image,
            mask,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub zoom_factor: f64,
    /// On the 8-bit scale.
    pub noise_mean: f64,
    /// On the 8-bit scale.
    pub noise_variance: f64,
    pub rotation_range_deg: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            zoom_factor: 1.5,
            noise_mean: 10.0,
            noise_variance: 10.0,
            rotation_range_deg: (-10.0, 10.0),
            seed: 0,
        }
    }
}

/// Divides 8-bit intensities by 255.
pub fn normalize(raw: &GrayImage) -> Tensor4<f32> {
    let (w, h) = raw.dimensions();
    Tensor4::from_vec(
        [1, 1, h as usize, w as usize],
        raw.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    )
    .expect("image buffer matches its dimensions")
}

/// Inverse of [`normalize`] with rounding and clamping, for the first image of the batch.
pub fn to_gray_image(x: &Tensor4<f32>) -> GrayImage {
    let d = x.dims();
    GrayImage::from_fn(d.w as u32, d.h as u32, |c, r| {
        Luma([(x.get(0, 0, r as usize, c as usize) * 255.0)
            .round()
            .clamp(0.0, 255.0) as u8])
    })
}

/// Bilinear sample of plane `(n, c)` at real coordinates; taps outside the
/// frame read as zero.
fn bilinear(x: &Tensor4<f32>, n: usize, c: usize, sy: f64, sx: f64) -> f32 {
    let d = x.dims();
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let tap = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= d.h as f64 || xx >= d.w as f64 {
            0.0
        } else {
            x.get(n, c, yy as usize, xx as usize) as f64
        }
    };
    let v = tap(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + tap(y0, x0 + 1.0) * (1.0 - fy) * fx
        + tap(y0 + 1.0, x0) * fy * (1.0 - fx)
        + tap(y0 + 1.0, x0 + 1.0) * fy * fx;
    v as f32
}

/// Label at the nearest pixel centre, background outside the frame.
fn nearest(m: &LabelMap, sy: f64, sx: f64) -> u8 {
    let (y, x) = ((sy + 0.5).floor(), (sx + 0.5).floor());
    if y < 0.0 || x < 0.0 || y >= m.height() as f64 || x >= m.width() as f64 {
        0
    } else {
        m.get(y as usize, x as usize)
    }
}

fn check_target(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "resize target {width}x{height} has a zero dimension"
        )));
    }
    Ok(())
}

/// Bilinear resize with pixel-centre alignment; edge taps are clamped.
pub fn resize_image(x: &Tensor4<f32>, height: usize, width: usize) -> Result<Tensor4<f32>> {
    check_target(height, width)?;
    let d = x.dims();
    if d.h == 0 || d.w == 0 {
        return Err(Error::ShapeMsg(format!("cannot resize an empty image {d}")));
    }
    if (d.h, d.w) == (height, width) {
        return Ok(x.clone());
    }
    let (ry, rx) = (d.h as f64 / height as f64, d.w as f64 / width as f64);
    Ok(Tensor4::from_fn(
        [d.n, d.c, height, width],
        |n, c, y, xx| {
            let sy = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (d.h - 1) as f64);
            let sx = ((xx as f64 + 0.5) * rx - 0.5).clamp(0.0, (d.w - 1) as f64);
            bilinear(x, n, c, sy, sx)
        },
    ))
}

/// Nearest-neighbour resize; every output label exists in the input.
pub fn resize_mask(m: &LabelMap, height: usize, width: usize) -> Result<LabelMap> {
    check_target(height, width)?;
    if m.height() == 0 || m.width() == 0 {
        return Err(Error::ShapeMsg("cannot resize an empty mask".into()));
    }
    let (ry, rx) = (
        m.height() as f64 / height as f64,
        m.width() as f64 / width as f64,
    );
    Ok(LabelMap::from_fn(height, width, |y, x| {
        let sy = (((y as f64 + 0.5) * ry).floor() as usize).min(m.height() - 1);
        let sx = (((x as f64 + 0.5) * rx).floor() as usize).min(m.width() - 1);
        m.get(sy, sx)
    }))
}

pub fn resize_sample(s: &Sample, height: usize, width: usize) -> Result<Sample> {
    Ok(Sample {
        image: resize_image(&s.image, height, width)?,
        mask: resize_mask(&s.mask, height, width)?,
        id: s.id.clone(),
    })
}

/// Maps each output pixel through `src_of(y, x)` into the source frame.
fn warp(s: &Sample, src_of: impl Fn(f64, f64) -> (f64, f64)) -> Sample {
    let (h, w) = (s.height(), s.width());
    let image = Tensor4::from_fn([1, 1, h, w], |_, _, y, x| {
        let (sy, sx) = src_of(y as f64, x as f64);
        bilinear(&s.image, 0, 0, sy, sx)
    });
    let mask = LabelMap::from_fn(h, w, |y, x| {
        let (sy, sx) = src_of(y as f64, x as f64);
        nearest(&s.mask, sy, sx)
    });
    Sample {
        image,
        mask,
        id: s.id.clone(),
    }
}

/// Scales the sample about its centre by `factor` and keeps the central
/// window at the original size.
pub fn zoom_clipped(s: &Sample, factor: f64) -> Result<Sample> {
    if !(factor > 1.0) {
        return Err(Error::Config(format!(
            "zoom factor must exceed 1, got {factor}"
        )));
    }
    let (cy, cx) = (
        (s.height() as f64 - 1.0) / 2.0,
        (s.width() as f64 - 1.0) / 2.0,
    );
    Ok(warp(s, |y, x| {
        (cy + (y - cy) / factor, cx + (x - cx) / factor)
    }))
}

/// Rotates counter-clockwise by `degrees` about the image centre; pixels
/// that come from outside the frame are zero / background.
pub fn rotate(s: &Sample, degrees: f64) -> Sample {
    if degrees == 0.0 {
        return s.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = (
        (s.height() as f64 - 1.0) / 2.0,
        (s.width() as f64 - 1.0) / 2.0,
    );
    warp(s, |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        // inverse rotation of the output coordinate (row axis points down)
        (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
    })
}

/// Draws `count` values from `N(mean, variance)` with a ChaCha8 stream.
pub fn noise_samples(mean: f64, variance: f64, seed: u64, count: usize) -> Result<Vec<f64>> {
    if !(variance >= 0.0) {
        return Err(Error::Config(format!(
            "noise variance must be non-negative, got {variance}"
        )));
    }
    let normal = Normal::new(mean, variance.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| normal.sample(&mut rng)).collect())
}

/// Adds per-pixel Gaussian noise on the 8-bit scale, clamps to `[0, 255]`
/// and renormalises. The mask is untouched.
pub fn gaussian_noise(s: &Sample, mean: f64, variance: f64, seed: u64) -> Result<Sample> {
    let noise = noise_samples(mean, variance, seed, s.image.len())?;
    let data = s
        .image
        .data()
        .iter()
        .zip(noise)
        .map(|(&v, n)| ((v as f64 * 255.0 + n).clamp(0.0, 255.0) / 255.0) as f32)
        .collect();
    Ok(Sample {
        image: Tensor4::from_vec(s.image.dims(), data)?,
        mask: s.mask.clone(),
        id: s.id.clone(),
    })
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Augmentation {
    Zoom(f64),
    Noise { mean: f64, variance: f64, seed: u64 },
    Rotate(f64),
}

impl Augmentation {
    pub fn apply(&self, s: &Sample) -> Result<Sample> {
        match *self {
            Augmentation::Zoom(f) => zoom_clipped(s, f),
            Augmentation::Noise {
                mean,
                variance,
                seed,
            } => gaussian_noise(s, mean, variance, seed),
            Augmentation::Rotate(d) => Ok(rotate(s, d)),
        }
    }
}

/// Grows `samples` to `target_count` by appending augmented copies of
/// uniformly drawn originals. Each copy gets one of the three augmentations,
/// also drawn uniformly; rotations draw their angle from the configured range.
pub fn augment_to_count(
    samples: &[Sample],
    target_count: usize,
    cfg: &AugmentConfig,
) -> Result<Vec<Sample>> {
    let mut out = samples.to_vec();
    if samples.is_empty() || target_count <= samples.len() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for k in 0..target_count - samples.len() {
        let src = &samples[rng.random_range(0..samples.len())];
        let aug = match rng.random_range(0..3) {
            0 => Augmentation::Zoom(cfg.zoom_factor),
            1 => Augmentation::Noise {
                mean: cfg.noise_mean,
                variance: cfg.noise_variance,
                seed: rng.random(),
            },
            _ => {
                let (lo, hi) = cfg.rotation_range_deg;
                Augmentation::Rotate(if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                })
            }
        };
        let mut s = aug.apply(src)?;
        s.id = format!("{}_aug{k}", src.id);
        out.push(s);
    }
    Ok(out)
}

pub const IMAGE_EXTENSIONS: [&str; 1] = ["png"];

pub fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::file(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|e| Error::file(path, e))?
        .to_luma8())
}

pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let img = read_gray(path)?;
    let (w, h) = img.dimensions();
    LabelMap::from_vec(h as usize, w as usize, img.into_raw()).map_err(|e| Error::file(path, e))
}

pub fn write_mask(mask: &LabelMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().to_vec(),
    )
    .expect("mask buffer matches its dimensions");
    img.save(path).map_err(|e| Error::file(path, e))
}

pub fn load_sample(image_path: &Path, mask_path: &Path, id: &str) -> Result<Sample> {
    let image = normalize(&read_gray(image_path)?);
    let mask = read_mask(mask_path)?;
    Sample::new(image, mask, id).map_err(|e| Error::file(image_path, e))
}

/// Pairs images and masks by file stem, in lexicographic order.
pub fn load_dataset(image_dir: &Path, mask_dir: &Path) -> Result<Vec<Sample>> {
    let images = stems(image_dir)?;
    let masks = stems(mask_dir)?;
    let orphans: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(|k| format!("image {k} has no mask"))
        .chain(
            masks
                .keys()
                .filter(|k| !images.contains_key(*k))
                .map(|k| format!("mask {k} has no image")),
        )
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Data(format!(
            "unpaired files: {}",
            orphans.join(", ")
        )));
    }
    images
        .iter()
        .map(|(id, path)| load_sample(path, &masks[id], id))
        .collect()
}

/// Loads the ids listed in `manifest` (one per line, `#` comments and blank
/// lines ignored) in manifest order.
pub fn load_manifest(manifest: &Path, image_dir: &Path, mask_dir: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::file(manifest, e))?;
    let images = stems(image_dir)?;
    let masks = stems(mask_dir)?;
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for id in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        match (images.get(id), masks.get(id)) {
            (Some(i), Some(m)) => out.push(load_sample(i, m, id)?),
            _ => missing.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "manifest ids without an image/mask pair: {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}
