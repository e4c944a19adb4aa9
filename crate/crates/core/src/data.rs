//! Dataset ingestion, preprocessing, augmentation and the synthetic
//! blob-lesion generator used for desk-scale verification.
//!
//! Images are [channels, H, W] arrays with values in [0, 1].

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One row of an EyePacs-style label index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecord {
    pub image_id: String,
    pub dr_grade: u8,
    pub is_rdr: bool,
    pub split: Split,
    pub path: PathBuf,
}

/// Referability threshold: moderate NPDR and worse.
pub const RDR_GRADE_THRESHOLD: u8 = 2;

pub fn grade_to_rdr(grade: u8) -> bool {
    grade >= RDR_GRADE_THRESHOLD
}

/// Loads an image index CSV (`image_id,grade` columns, header required),
/// derives rDR labels and drops rows whose image file is missing.
///
/// Returns the records plus the count of skipped rows.
pub fn load_index(
    labels_csv: &Path,
    image_dir: &Path,
    split_map: &HashMap<String, Split>,
) -> Result<(Vec<LabelRecord>, usize)> {
    let mut reader = csv::Reader::from_path(labels_csv).map_err(|e| Error::Ingestion {
        path: labels_csv.display().to_string(),
        message: e.to_string(),
    })?;
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Ingestion {
            path: labels_csv.display().to_string(),
            message: e.to_string(),
        })?;
        let image_id = row
            .get(0)
            .ok_or_else(|| Error::Validation {
                row: row_idx + 1,
                message: "missing image id column".into(),
            })?
            .to_string();
        let grade: i64 = row
            .get(1)
            .and_then(|g| g.trim().parse().ok())
            .ok_or_else(|| Error::Validation {
                row: row_idx + 1,
                message: format!("grade column unreadable for {image_id}"),
            })?;
        if !(0..=4).contains(&grade) {
            return Err(Error::Validation {
                row: row_idx + 1,
                message: format!("grade {grade} outside 0-4 for {image_id}"),
            });
        }
        let path = find_image(image_dir, &image_id);
        let Some(path) = path else {
            skipped += 1;
            continue;
        };
        records.push(LabelRecord {
            is_rdr: grade_to_rdr(grade as u8),
            dr_grade: grade as u8,
            split: split_map.get(&image_id).copied().unwrap_or(Split::Train),
            image_id,
            path,
        });
    }
    Ok((records, skipped))
}

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    for ext in ["png", "jpeg", "jpg"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Some(p);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Image decode / encode
// ---------------------------------------------------------------------------

/// Decodes a PNG/JPEG file to a [C,H,W] array in [0,1]. Grayscale images keep
/// one channel.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        }
    })
}

/// Writes a [C,H,W] array in [0,1] as PNG (C must be 1 or 3).
pub fn save_image(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([to_u8(img[[0, y as usize, x as usize]])])
            });
            buf.save(path).map_err(|e| Error::Decode {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        }
        3 => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([
                    to_u8(img[[0, y as usize, x as usize]]),
                    to_u8(img[[1, y as usize, x as usize]]),
                    to_u8(img[[2, y as usize, x as usize]]),
                ])
            });
            buf.save(path).map_err(|e| Error::Decode {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        }
        _ => Err(Error::Dimension(format!("cannot encode {c}-channel image"))),
    }
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Center square crop then bilinear resize to `target` x `target`.
pub fn preprocess(image: &Array3<f64>, target: usize) -> Result<Array3<f64>> {
    let (_, h, w) = image.dim();
    if h < 64 || w < 64 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} below the 64 px minimum"
        )));
    }
    let side = h.min(w);
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    let cropped = image
        .slice(ndarray::s![.., y0..y0 + side, x0..x0 + side])
        .to_owned();
    if side == target {
        return Ok(cropped);
    }
    crate::affine::apply_affine(
        &cropped,
        &crate::affine::AffineSpec::Rescale {
            scale_factor: target as f64 / side as f64,
        },
    )
    .map(|mut r| {
        // rounding of side*target/side is exact, but guard anyway
        debug_assert_eq!(r.dim().1, target);
        r.mapv_inplace(|v| v.clamp(0.0, 1.0));
        r
    })
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Probability of each independent transform.
    pub prob: f64,
    pub max_rotation_deg: f64,
    pub max_translate_frac: f64,
    pub crop_scale_min: f64,
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            prob: 0.5,
            max_rotation_deg: 15.0,
            max_translate_frac: 0.05,
            crop_scale_min: 0.9,
            jitter: 0.1,
        }
    }
}

/// Inverse-mapped affine sample of one output pixel; bilinear for images.
fn sample_bilinear(img: &Array3<f64>, sy: f64, sx: f64) -> Vec<f64> {
    let (c, h, w) = img.dim();
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = sy - y0 as f64;
    let wx = sx - x0 as f64;
    (0..c)
        .map(|ci| {
            let top = img[[ci, y0, x0]] * (1.0 - wx) + img[[ci, y0, x1]] * wx;
            let bot = img[[ci, y1, x0]] * (1.0 - wx) + img[[ci, y1, x1]] * wx;
            top * (1.0 - wy) + bot * wy
        })
        .collect()
}

/// A continuous in-place geometric transform: rotation about the center,
/// translation, and zoom (crop-and-resize-back). Output dims equal input dims.
#[derive(Debug, Clone, Copy)]
pub struct GeometricTransform {
    pub rotation_deg: f64,
    pub translate_y: f64,
    pub translate_x: f64,
    /// Sampling-window scale; < 1 zooms in (random crop resized back).
    pub zoom: f64,
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self { rotation_deg: 0.0, translate_y: 0.0, translate_x: 0.0, zoom: 1.0 }
    }

    /// Source coordinates for an output pixel (inverse mapping).
    fn source(&self, h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let theta = -self.rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let dy = (y as f64 - cy) * self.zoom;
        let dx = (x as f64 - cx) * self.zoom;
        let ry = c * dy - s * dx;
        let rx = s * dy + c * dx;
        (ry + cy - self.translate_y, rx + cx - self.translate_x)
    }

    pub fn apply_image(&self, img: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = img.dim();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(h, w, y, x);
                for (ci, v) in sample_bilinear(img, sy, sx).into_iter().enumerate() {
                    out[[ci, y, x]] = v;
                }
            }
        }
        out
    }

    /// Nearest-neighbor variant so binary masks stay binary.
    pub fn apply_mask(&self, mask: &Array2<u8>) -> Array2<u8> {
        let (h, w) = mask.dim();
        let mut out = Array2::<u8>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(h, w, y, x);
                let iy = sy.round();
                let ix = sx.round();
                if iy >= 0.0 && ix >= 0.0 && (iy as usize) < h && (ix as usize) < w {
                    out[[y, x]] = mask[[iy as usize, ix as usize]];
                }
            }
        }
        out
    }
}

fn flip_image_h(img: &Array3<f64>) -> Array3<f64> {
    crate::affine::apply_affine(img, &crate::affine::AffineSpec::HFlip).unwrap()
}

fn flip_image_v(img: &Array3<f64>) -> Array3<f64> {
    crate::affine::apply_affine(img, &crate::affine::AffineSpec::VFlip).unwrap()
}

fn flip_mask_h(m: &Array2<u8>) -> Array2<u8> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| m[[y, w - 1 - x]])
}

fn flip_mask_v(m: &Array2<u8>) -> Array2<u8> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| m[[h - 1 - y, x]])
}

/// Applies each augmentation independently with probability `cfg.prob`,
/// transforming the optional lesion mask jointly with the image.
pub fn augment_with_mask(
    image: &Array3<f64>,
    mask: Option<&Array2<u8>>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, Option<Array2<u8>>) {
    let (_, h, w) = image.dim();
    let mut img = image.clone();
    let mut msk = mask.cloned();

    if rng.gen_bool(cfg.prob) {
        img = flip_image_h(&img);
        msk = msk.map(|m| flip_mask_h(&m));
    }
    if rng.gen_bool(cfg.prob) {
        img = flip_image_v(&img);
        msk = msk.map(|m| flip_mask_v(&m));
    }

    let mut geo = GeometricTransform::identity();
    let mut any_geo = false;
    if rng.gen_bool(cfg.prob) {
        geo.rotation_deg = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        any_geo = true;
    }
    if rng.gen_bool(cfg.prob) {
        let ty = cfg.max_translate_frac * h as f64;
        let tx = cfg.max_translate_frac * w as f64;
        geo.translate_y = rng.gen_range(-ty..=ty);
        geo.translate_x = rng.gen_range(-tx..=tx);
        any_geo = true;
    }
    if rng.gen_bool(cfg.prob) {
        geo.zoom = rng.gen_range(cfg.crop_scale_min..=1.0);
        any_geo = true;
    }
    if any_geo {
        img = geo.apply_image(&img);
        msk = msk.map(|m| geo.apply_mask(&m));
    }

    if rng.gen_bool(cfg.prob) {
        let brightness = 1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter);
        let contrast = 1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter);
        let mean = img.mean().unwrap_or(0.0);
        img.mapv_inplace(|v| (((v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0));
        if img.dim().0 == 3 {
            let saturation = 1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter);
            let (_, hh, ww) = img.dim();
            for y in 0..hh {
                for x in 0..ww {
                    let gray =
                        (img[[0, y, x]] + img[[1, y, x]] + img[[2, y, x]]) / 3.0;
                    for ci in 0..3 {
                        img[[ci, y, x]] =
                            (gray + (img[[ci, y, x]] - gray) * saturation).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    (img, msk)
}

pub fn augment(image: &Array3<f64>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Array3<f64> {
    augment_with_mask(image, None, cfg, rng).0
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundTexture {
    Flat,
    Vignette,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub lesion_count_min: usize,
    pub lesion_count_max: usize,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    pub background_texture: BackgroundTexture,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            image_size: 64,
            lesion_count_min: 1,
            lesion_count_max: 3,
            lesion_radius_min: 3.0,
            lesion_radius_max: 6.0,
            background_texture: BackgroundTexture::Vignette,
            positive_fraction: 0.5,
            seed: 0,
        }
    }
}

/// One item of an in-memory dataset: image, image-level label, optional
/// ground-truth lesion mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f64>,
    pub is_rdr: bool,
    pub mask: Option<Array2<u8>>,
}

/// Generates the seeded synthetic blob-lesion dataset.
///
/// Positives contain 1..=N bright irregular discs with a binary mask;
/// negatives share the background texture and noise but carry no lesion.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if !(cfg.positive_fraction > 0.0 && cfg.positive_fraction < 1.0) {
        return Err(Error::Config(format!(
            "positive_fraction must be in (0,1), got {}",
            cfg.positive_fraction
        )));
    }
    if cfg.lesion_radius_max >= cfg.image_size as f64 / 4.0 {
        return Err(Error::Config(format!(
            "lesion radius {} too large for image size {}",
            cfg.lesion_radius_max, cfg.image_size
        )));
    }
    if cfg.lesion_count_min < 1 || cfg.lesion_count_min > cfg.lesion_count_max {
        return Err(Error::Config("invalid lesion count range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size;
    let n_pos = (cfg.n_images as f64 * cfg.positive_fraction).round() as usize;

    // deterministic label sequence, shuffled so any contiguous slice is mixed
    let mut labels: Vec<bool> = (0..cfg.n_images).map(|i| i < n_pos).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }

    let mut out = Vec::with_capacity(cfg.n_images);
    for (idx, &positive) in labels.iter().enumerate() {
        let mut img = Array3::<f64>::zeros((1, s, s));
        match cfg.background_texture {
            BackgroundTexture::Flat => img.fill(0.2),
            BackgroundTexture::Vignette => {
                let c = (s as f64 - 1.0) / 2.0;
                let rmax = c * std::f64::consts::SQRT_2;
                for y in 0..s {
                    for x in 0..s {
                        let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() / rmax;
                        img[[0, y, x]] = 0.30 - 0.18 * d * d;
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = (*v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
        }

        let mut mask = Array2::<u8>::zeros((s, s));
        if positive {
            let count = rng.gen_range(cfg.lesion_count_min..=cfg.lesion_count_max);
            for _ in 0..count {
                draw_blob(&mut img, &mut mask, cfg, &mut rng);
            }
        }
        out.push(Sample {
            id: format!("synth_{idx:05}"),
            image: img,
            is_rdr: positive,
            mask: Some(mask),
        });
    }
    Ok(out)
}

fn draw_blob(img: &mut Array3<f64>, mask: &mut Array2<u8>, cfg: &SynthConfig, rng: &mut ChaCha8Rng) {
    let s = cfg.image_size;
    let r0 = rng.gen_range(cfg.lesion_radius_min..=cfg.lesion_radius_max);
    let margin = (r0 * 1.4).ceil() as usize + 1;
    let cy = rng.gen_range(margin..s - margin) as f64;
    let cx = rng.gen_range(margin..s - margin) as f64;
    let brightness = rng.gen_range(0.55..0.75);
    // irregular boundary: radius modulated by two random harmonics
    let a1 = rng.gen_range(0.0..0.25);
    let p1 = rng.gen_range(0.0..std::f64::consts::TAU);
    let a2 = rng.gen_range(0.0..0.15);
    let p2 = rng.gen_range(0.0..std::f64::consts::TAU);
    let lo = (cy - r0 * 1.5).floor().max(0.0) as usize;
    let hi = ((cy + r0 * 1.5).ceil() as usize).min(s - 1);
    let lo_x = (cx - r0 * 1.5).floor().max(0.0) as usize;
    let hi_x = ((cx + r0 * 1.5).ceil() as usize).min(s - 1);
    for y in lo..=hi {
        for x in lo_x..=hi_x {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let d = (dy * dy + dx * dx).sqrt();
            let theta = dy.atan2(dx);
            let r = r0 * (1.0 + a1 * (theta + p1).sin() + a2 * (2.0 * theta + p2).sin());
            if d <= r {
                // soft edge over the outer pixel
                let edge = ((r - d).min(1.0)).max(0.0);
                let v = img[[0, y, x]] + brightness * edge;
                img[[0, y, x]] = v.min(1.0);
                mask[[y, x]] = 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset directory format
// ---------------------------------------------------------------------------

/// Writes `images/`, `masks/` and `index.csv` (image_id,is_rdr,mask_path).
pub fn write_synthetic_dir(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut csv = String::from("image_id,is_rdr,mask_path\n");
    for s in samples {
        let img_path = dir.join("images").join(format!("{}.png", s.id));
        save_image(&img_path, &s.image)?;
        let mask_rel = match &s.mask {
            Some(m) => {
                let (h, w) = m.dim();
                let mp = dir.join("masks").join(format!("{}.png", s.id));
                let as_img = Array3::from_shape_fn((1, h, w), |(_, y, x)| m[[y, x]] as f64);
                save_image(&mp, &as_img)?;
                format!("masks/{}.png", s.id)
            }
            None => String::new(),
        };
        csv.push_str(&format!("{},{},{}\n", s.id, u8::from(s.is_rdr), mask_rel));
    }
    std::fs::write(dir.join("index.csv"), csv)?;
    Ok(())
}

/// Loads a directory written by [`write_synthetic_dir`].
pub fn load_synthetic_dir(dir: &Path) -> Result<Vec<Sample>> {
    let index = dir.join("index.csv");
    let mut reader = csv::Reader::from_path(&index).map_err(|e| Error::Ingestion {
        path: index.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Ingestion {
            path: index.display().to_string(),
            message: e.to_string(),
        })?;
        let id = row.get(0).unwrap_or_default().to_string();
        let is_rdr = row.get(1) == Some("1");
        let image = load_image(&dir.join("images").join(format!("{id}.png")))?;
        let mask = match row.get(2) {
            Some(rel) if !rel.is_empty() => {
                let m = load_image(&dir.join(rel))?;
                let (_, h, w) = m.dim();
                Some(Array2::from_shape_fn((h, w), |(y, x)| {
                    u8::from(m[[0, y, x]] > 0.5)
                }))
            }
            _ => None,
        };
        if id.is_empty() {
            return Err(Error::Validation {
                row: row_idx + 1,
                message: "empty image_id".into(),
            });
        }
        out.push(Sample { id, image, is_rdr, mask });
    }
    Ok(out)
}
