//! Dataset ingestion: PNG images, id or palette-coded masks, TSV manifests,
//! and a synthetic-shapes generator for desk-scale experiments.

use std::path::{Path, PathBuf};

use image::{ColorType, GenericImageView};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfError, Result};

pub const IGNORE_ID: u8 = 255;

#[derive(Clone, Debug)]
pub struct SegSample {
    pub id: String,
    /// Interleaved RGB, row-major, `height*width*3` bytes.
    pub image: Vec<u8>,
    /// Class ids, `height*width` bytes; 255 marks ignored pixels.
    pub mask: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl SegSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.height * self.width;
        if self.image.len() != 3 * n || self.mask.len() != n {
            return Err(AfError::Data {
                path: self.id.clone(),
                msg: format!(
                    "buffer sizes {}/{} disagree with {}x{}",
                    self.image.len(),
                    self.mask.len(),
                    self.height,
                    self.width
                ),
            });
        }
        for (i, &m) in self.mask.iter().enumerate() {
            if m != IGNORE_ID && m as usize >= num_classes {
                return Err(AfError::Data {
                    path: self.id.clone(),
                    msg: format!(
                        "mask value {m} at pixel ({}, {}) outside [0,{num_classes})",
                        i / self.width,
                        i % self.width
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Class palette: `colors[id]` is the RGB rendering of class `id`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

impl Palette {
    pub fn from_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AfError::Data {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn id_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.colors.iter().position(|c| *c == rgb).map(|i| i as u8)
    }

    /// Evenly spread distinct colors for `n` classes.
    pub fn generate(n: usize) -> Self {
        let colors = (0..n)
            .map(|i| {
                let hue = i as f64 / n as f64 * 360.0;
                hsv_to_rgb(hue, 0.85, if i == 0 { 0.25 } else { 0.95 })
            })
            .collect();
        Palette { colors }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as usize % 6 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

// ── PNG IO ───────────────────────────────────────────────────────────

pub fn load_image_rgb(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| AfError::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let (w, h) = img.dimensions();
    Ok((img.to_rgb8().into_raw(), h as usize, w as usize))
}

/// Mask PNG: either 8-bit single-channel class ids, or RGB decoded through
/// `palette` (required for RGB files).
pub fn load_mask(path: &Path, palette: Option<&Palette>) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| AfError::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let (w, h) = img.dimensions();
    match img {
        image::DynamicImage::ImageLuma8(l) => Ok((l.into_raw(), h as usize, w as usize)),
        other => {
            let palette = palette.ok_or_else(|| AfError::Data {
                path: path.display().to_string(),
                msg: "RGB mask requires a palette file".into(),
            })?;
            let rgb = other.to_rgb8();
            let mut ids = Vec::with_capacity((h * w) as usize);
            for (x, y, px) in rgb.enumerate_pixels() {
                let c = [px[0], px[1], px[2]];
                let id = palette.id_of(c).ok_or_else(|| AfError::Data {
                    path: path.display().to_string(),
                    msg: format!("color {c:?} at ({y}, {x}) not in palette"),
                })?;
                ids.push(id);
            }
            Ok((ids, h as usize, w as usize))
        }
    }
}

pub fn save_png_rgb(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    image::save_buffer(path, data, w as u32, h as u32, ColorType::Rgb8).map_err(|e| {
        AfError::Data {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    })
}

pub fn save_png_gray(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    image::save_buffer(path, data, w as u32, h as u32, ColorType::L8).map_err(|e| {
        AfError::Data {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    })
}

/// Render an id-mask through the palette (ignore pixels come out black).
pub fn colorize_mask(mask: &[u8], palette: &Palette) -> Vec<u8> {
    let mut out = Vec::with_capacity(mask.len() * 3);
    for &m in mask {
        let c = palette
            .colors
            .get(m as usize)
            .copied()
            .unwrap_or([0, 0, 0]);
        out.extend_from_slice(&c);
    }
    out
}

// ── manifest ─────────────────────────────────────────────────────────

/// Line-delimited `image_path<TAB>mask_path`, relative to the manifest's
/// directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| AfError::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (img, mask) = (parts.next(), parts.next());
        match (img, mask) {
            (Some(i), Some(m)) if parts.next().is_none() => {
                pairs.push((root.join(i), root.join(m)));
            }
            _ => {
                return Err(AfError::Data {
                    path: path.display().to_string(),
                    msg: format!("line {}: expected image_path<TAB>mask_path", lineno + 1),
                })
            }
        }
    }
    Ok(pairs)
}

pub fn ingest_dataset(
    manifest: &Path,
    palette: Option<&Palette>,
    num_classes: usize,
) -> Result<Vec<SegSample>> {
    let mut samples = Vec::new();
    for (img_path, mask_path) in read_manifest(manifest)? {
        let (image, h, w) = load_image_rgb(&img_path)?;
        let (mask, mh, mw) = load_mask(&mask_path, palette)?;
        if (mh, mw) != (h, w) {
            return Err(AfError::Data {
                path: format!("{} / {}", img_path.display(), mask_path.display()),
                msg: format!("image {h}x{w} and mask {mh}x{mw} sizes differ"),
            });
        }
        let sample = SegSample {
            id: img_path.display().to_string(),
            image,
            mask,
            height: h,
            width: w,
        };
        sample.validate(num_classes)?;
        samples.push(sample);
    }
    Ok(samples)
}

// ── synthetic shapes ─────────────────────────────────────────────────

/// Dataset of `n` images: a textured class-0 background with random filled
/// rectangles and disks of classes `1..num_classes`, colored per class so a
/// segmentation is learnable from color alone.
pub fn make_synthetic(
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
    rng_noise: f64,
) -> Result<Vec<SegSample>> {
    if num_classes < 2 {
        return Err(AfError::Config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let palette = Palette::generate(num_classes);
    let mut rng = crate::params::seeded_rng(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut mask = vec![0u8; size * size];
        let shapes = rng.gen_range(3..=6);
        for _ in 0..shapes {
            let cls = rng.gen_range(1..num_classes) as u8;
            let cy = rng.gen_range(0..size) as i64;
            let cx = rng.gen_range(0..size) as i64;
            let r = rng.gen_range(size / 8..=size / 3) as i64;
            let rect = rng.gen_bool(0.5);
            for y in (cy - r).max(0)..(cy + r).min(size as i64) {
                for x in (cx - r).max(0)..(cx + r).min(size as i64) {
                    let inside = if rect {
                        true
                    } else {
                        (y - cy).pow(2) + (x - cx).pow(2) <= r * r
                    };
                    if inside {
                        mask[y as usize * size + x as usize] = cls;
                    }
                }
            }
        }
        let mut image = Vec::with_capacity(size * size * 3);
        for &m in &mask {
            let base = palette.colors[m as usize];
            for c in 0..3 {
                let noise = rng.gen_range(-rng_noise..=rng_noise) * 255.0;
                image.push((base[c] as f64 + noise).clamp(0.0, 255.0) as u8);
            }
        }
        samples.push(SegSample {
            id: format!("synthetic_{i:03}"),
            image,
            mask,
            height: size,
            width: size,
        });
    }
    Ok(samples)
}

/// Write a synthetic dataset to disk: images/, masks/, manifest.tsv,
/// palette.json.
pub fn write_dataset(samples: &[SegSample], num_classes: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::new();
    for s in samples {
        let img_rel = format!("images/{}.png", s.id);
        let mask_rel = format!("masks/{}.png", s.id);
        save_png_rgb(&dir.join(&img_rel), &s.image, s.height, s.width)?;
        save_png_gray(&dir.join(&mask_rel), &s.mask, s.height, s.width)?;
        manifest.push_str(&format!("{img_rel}\t{mask_rel}\n"));
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    Palette::generate(num_classes).to_json(&dir.join("palette.json"))?;
    Ok(())
}
