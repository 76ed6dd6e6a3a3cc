//! Procedural corpus: one shape family per class, rendered at random pose and
//! scale with a palette fill colour, a procedural texture, and a noisy
//! background. The rendered footprint doubles as the ground-truth saliency mask.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sketch::{extract_pseudosketch, score_and_filter, ExtractionConfig};
use super::{ImageRecord, Manifest, Split};
use crate::error::{bail_config, Result};
use crate::raster::{Mask, Raster};

pub const DEFAULT_PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.6, 0.2],
    [0.15, 0.3, 0.85],
    [0.9, 0.75, 0.1],
    [0.55, 0.2, 0.7],
    [0.1, 0.1, 0.1],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Disc,
    Square,
    Triangle,
    Star,
    Ring,
    Cross,
    Hexagon,
    Crescent,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Disc,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Star,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Hexagon,
        ShapeFamily::Crescent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Disc => "disc",
            ShapeFamily::Square => "square",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Star => "star",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Hexagon => "hexagon",
            ShapeFamily::Crescent => "crescent",
        }
    }

    /// Inside test in the shape's unit frame (radius ~1).
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        match self {
            ShapeFamily::Disc => r <= 1.0,
            ShapeFamily::Square => u.abs().max(v.abs()) <= 0.8,
            ShapeFamily::Triangle => in_polygon(u, v, &regular_polygon(3, 1.0, 0.0)),
            ShapeFamily::Star => in_polygon(u, v, &regular_polygon(5, 1.0, 0.42)),
            ShapeFamily::Ring => (0.55..=1.0).contains(&r),
            ShapeFamily::Cross => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
            ShapeFamily::Hexagon => in_polygon(u, v, &regular_polygon(6, 1.0, 0.0)),
            ShapeFamily::Crescent => r <= 1.0 && ((u - 0.5).powi(2) + v * v).sqrt() > 0.8,
        }
    }
}

/// Vertices of a regular polygon; with `inner > 0` alternate vertices sit on
/// the inner radius (a star).
fn regular_polygon(n: usize, outer: f64, inner: f64) -> Vec<(f64, f64)> {
    let verts = if inner > 0.0 { 2 * n } else { n };
    (0..verts)
        .map(|i| {
            let a = -PI / 2.0 + 2.0 * PI * i as f64 / verts as f64;
            let r = if inner > 0.0 && i % 2 == 1 { inner } else { outer };
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_classes: usize,
    pub per_class_count: usize,
    pub resolution: usize,
    pub texture_palette: Vec<[f32; 3]>,
    pub seed: u64,
    /// Fraction of each class assigned to the validation split.
    pub val_fraction: f64,
    pub extraction: ExtractionConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            per_class_count: 64,
            resolution: 32,
            texture_palette: DEFAULT_PALETTE.to_vec(),
            seed: 1,
            val_fraction: 0.125,
            extraction: ExtractionConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > ShapeFamily::ALL.len() {
            bail_config!("n_classes must be in [2, {}], got {}", ShapeFamily::ALL.len(), self.n_classes);
        }
        if self.per_class_count < 8 {
            bail_config!("per_class_count must be >= 8, got {}", self.per_class_count);
        }
        if self.resolution < 32 || !self.resolution.is_power_of_two() {
            bail_config!("resolution must be a power of two >= 32, got {}", self.resolution);
        }
        if self.texture_palette.is_empty() {
            bail_config!("texture palette is empty");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            bail_config!("val_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn val_count(&self) -> usize {
        ((self.per_class_count as f64 * self.val_fraction).round() as usize).min(self.per_class_count - 1)
    }
}

#[derive(Clone, Copy)]
enum Texture {
    Stripes { angle: f64, period: f64 },
    Checker { period: f64 },
    Dots { period: f64 },
    Flat,
}

fn texture_value(t: Texture, x: f64, y: f64) -> f64 {
    match t {
        Texture::Stripes { angle, period } => {
            let p = x * angle.cos() + y * angle.sin();
            if (p / period).rem_euclid(1.0) < 0.5 { 1.0 } else { -1.0 }
        }
        Texture::Checker { period } => {
            let a = (x / period).floor() as i64 + (y / period).floor() as i64;
            if a.rem_euclid(2) == 0 { 1.0 } else { -1.0 }
        }
        Texture::Dots { period } => {
            let fx = (x / period).rem_euclid(1.0) - 0.5;
            let fy = (y / period).rem_euclid(1.0) - 0.5;
            if fx * fx + fy * fy < 0.06 { 1.0 } else { -0.3 }
        }
        Texture::Flat => 0.0,
    }
}

/// Renders one image and its ground-truth mask.
fn render(family: ShapeFamily, size: usize, palette: &[[f32; 3]], rng: &mut ChaCha8Rng) -> (Raster, Mask) {
    let s = size as f64;
    let cx = rng.random_range(0.38..0.62) * s;
    let cy = rng.random_range(0.38..0.62) * s;
    let radius = rng.random_range(0.22..0.33) * s;
    let theta = rng.random_range(0.0..2.0 * PI);

    let base = palette[rng.random_range(0..palette.len())];
    let fill: Vec<f64> = base.iter().map(|&c| (c as f64 + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)).collect();
    let texture = match rng.random_range(0..4) {
        0 => Texture::Stripes { angle: rng.random_range(0.0..PI), period: rng.random_range(4.0..8.0) },
        1 => Texture::Checker { period: rng.random_range(3.0..6.0) },
        2 => Texture::Dots { period: rng.random_range(4.0..7.0) },
        _ => Texture::Flat,
    };
    let amp = 0.07;
    let bg: Vec<f64> = (0..3).map(|_| rng.random_range(0.78..0.95)).collect();

    let mut img = Raster::filled(size, size, 3, 0.0);
    let mut mask = Mask::new(size, size);
    let (sin, cos) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if family.contains(u, v) {
                mask.set(y, x, true);
                let t = texture_value(texture, x as f64, y as f64);
                for c in 0..3 {
                    img.set(y, x, c, (fill[c] + amp * t).clamp(0.0, 1.0) as f32);
                }
            } else {
                for c in 0..3 {
                    let n = rng.random_range(-0.04..0.04);
                    img.set(y, x, c, (bg[c] + n).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    img.quantize_u8();
    (img, mask)
}

/// Generates the corpus and runs pseudosketch extraction and scoring on every
/// image. No records are dropped here (threshold 1); apply
/// [`score_and_filter`] with the production threshold afterwards.
pub fn generate_toy_corpus(cfg: &CorpusConfig) -> Result<Manifest> {
    cfg.validate()?;
    let families = &ShapeFamily::ALL[..cfg.n_classes];
    let val_from = cfg.per_class_count - cfg.val_count();
    let mut pairs = Vec::with_capacity(cfg.n_classes * cfg.per_class_count);
    for (class, family) in families.iter().enumerate() {
        for i in 0..cfg.per_class_count {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((class * cfg.per_class_count + i) as u64);
            let (pixels, mask) = render(*family, cfg.resolution, &cfg.texture_palette, &mut rng);
            let record = ImageRecord {
                id: format!("{}-{:04}", family.name(), i),
                class_label: class,
                pixels,
                split: if i >= val_from { Split::Val } else { Split::Train },
                mask: Some(mask.clone()),
            };
            let sketch = extract_pseudosketch(&record, &mask, &cfg.extraction)?;
            pairs.push((record, sketch));
        }
    }
    pairs.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let template = Manifest {
        records: Vec::new(),
        class_names: families.iter().map(|f| f.name().to_string()).collect(),
        resolution: (cfg.resolution, cfg.resolution),
        seed: cfg.seed,
    };
    Ok(score_and_filter(pairs, 1.0, template, &cfg.extraction)?.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusConfig {
        CorpusConfig { n_classes: 2, per_class_count: 8, resolution: 32, seed, ..Default::default() }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_toy_corpus(&small(7)).unwrap();
        let b = generate_toy_corpus(&small(7)).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        for ((ia, sa), (ib, sb)) in a.records.iter().zip(&b.records) {
            assert_eq!(ia.pixels.to_png_bytes().unwrap(), ib.pixels.to_png_bytes().unwrap());
            assert_eq!(sa.pixels, sb.pixels);
        }
    }

    #[test]
    fn seed_changes_pixels() {
        let a = generate_toy_corpus(&small(7)).unwrap();
        let b = generate_toy_corpus(&small(8)).unwrap();
        assert!(a.records.iter().zip(&b.records).any(|(x, y)| x.0.pixels != y.0.pixels));
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            CorpusConfig { resolution: 48, ..small(1) },
            CorpusConfig { resolution: 16, ..small(1) },
            CorpusConfig { texture_palette: vec![], ..small(1) },
            CorpusConfig { n_classes: 1, ..small(1) },
            CorpusConfig { per_class_count: 7, ..small(1) },
        ] {
            assert!(generate_toy_corpus(&cfg).is_err());
        }
    }

    #[test]
    fn masks_match_rendered_footprint() {
        let m = generate_toy_corpus(&small(3)).unwrap();
        for (img, _) in &m.records {
            let mask = img.mask.as_ref().unwrap();
            assert!(mask.count() > 50);
            // background pixels are light, footprint pixels carry the fill
            assert!(!mask.get(0, 0));
        }
        m.validate().unwrap();
    }

    #[test]
    fn split_assignment() {
        let m = generate_toy_corpus(&small(3)).unwrap();
        let val = m.split(Split::Val).len();
        assert_eq!(val, 2);
    }
}
