//! Pseudosketch extraction: saliency mask, background blur, edge extraction,
//! mask-local stroke suppression, and edge-agreement quality scoring.

use serde::{Deserialize, Serialize};

use super::{ImageRecord, Manifest, SketchRecord};
use crate::error::{bail_config, CogsError, Result};
use crate::imaging::{canny, dilate, gaussian_blur, squared_distance_transform, EdgeConfig};
use crate::raster::{Mask, Raster};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Sigma of the background blur; also the dilation radius for stroke suppression.
    pub blur_sigma: f64,
    pub edges: EdgeConfig,
    /// Stroke and reference pixels closer than this (in px) count as matched
    /// when scoring; 0 demands exact pixel agreement.
    pub match_tolerance: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { blur_sigma: 2.0, edges: EdgeConfig::default(), match_tolerance: 1.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Saliency {
    pub mask: Mask,
    /// Set when the estimate fell back to the full frame.
    pub warning: Option<String>,
}

/// Saliency for a record: the rendered mask when one exists, otherwise the heuristic.
pub fn estimate_saliency(image: &ImageRecord) -> Saliency {
    match &image.mask {
        Some(mask) if !mask.is_empty() => Saliency { mask: mask.clone(), warning: None },
        _ => heuristic_saliency(&image.pixels),
    }
}

/// Centre prior times colour contrast against the mean colour, thresholded at its median.
pub fn heuristic_saliency(img: &Raster) -> Saliency {
    let (h, w, c) = img.shape();
    let lo = img.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo <= 1e-9 {
        return Saliency { mask: Mask::full(h, w), warning: Some("constant image: using full-frame mask".into()) };
    }
    let n = (h * w) as f64;
    let mut mean = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += img.get(y, x, ch) as f64 / n;
            }
        }
    }
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let sigma = 0.3 * h.min(w) as f64;
    let mut scores = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let contrast: f64 =
                (0..c).map(|ch| (img.get(y, x, ch) as f64 - mean[ch]).powi(2)).sum::<f64>().sqrt();
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            scores.push(contrast * (-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(sorted.len() - 1) / 2];
    let mut mask = Mask { height: h, width: w, data: scores.iter().map(|&s| s > median).collect() };
    if mask.is_empty() {
        mask.data = scores.iter().map(|&s| s >= median).collect();
    }
    Saliency { mask, warning: None }
}

/// Blurs the non-salient region, extracts edges, and keeps strokes inside the
/// mask dilated by `blur_sigma`.
pub fn extract_pseudosketch(image: &ImageRecord, mask: &Mask, cfg: &ExtractionConfig) -> Result<SketchRecord> {
    if cfg.blur_sigma <= 0.0 {
        bail_config!("blur_sigma must be positive, got {}", cfg.blur_sigma);
    }
    let px = &image.pixels;
    if (mask.height, mask.width) != (px.height, px.width) {
        return Err(CogsError::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height, mask.width, px.height, px.width
        )));
    }
    if mask.is_empty() {
        return Err(CogsError::EmptyMask);
    }
    let blurred = gaussian_blur(px, cfg.blur_sigma);
    let mut composite = blurred;
    for (i, &salient) in mask.data.iter().enumerate() {
        if salient {
            let c = px.channels;
            composite.data[i * c..(i + 1) * c].copy_from_slice(&px.data[i * c..(i + 1) * c]);
        }
    }
    let edges = canny(&composite, &cfg.edges);
    let strokes = edges.and(&dilate(mask, cfg.blur_sigma));
    Ok(SketchRecord {
        id: format!("sk-{}", image.id),
        source_image_id: image.id.clone(),
        pixels: strokes,
        quality_score: 1.0,
    })
}

/// Edge map of the unblurred image restricted to the dilated saliency mask.
pub fn reference_edges(image: &Raster, mask: &Mask, cfg: &ExtractionConfig) -> Mask {
    canny(image, &cfg.edges).and(&dilate(mask, cfg.blur_sigma))
}

/// `1 + 4 * F1` between sketch strokes and reference edges, where a pixel is
/// matched if the other map has a pixel within `tolerance`. Two empty maps
/// agree perfectly.
pub fn quality_score(sketch: &Mask, reference: &Mask, tolerance: f64) -> f64 {
    1.0 + 4.0 * edge_f1(sketch, reference, tolerance)
}

fn matched_fraction(from: &Mask, to: &Mask, tolerance: f64) -> f64 {
    let Ok(sq) = squared_distance_transform(to) else { return 0.0 };
    let limit = tolerance * tolerance;
    let hits = from.data.iter().zip(&sq).filter(|(&on, &d)| on && d <= limit).count();
    hits as f64 / from.count() as f64
}

fn edge_f1(sketch: &Mask, reference: &Mask, tolerance: f64) -> f64 {
    match (sketch.is_empty(), reference.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let precision = matched_fraction(sketch, reference, tolerance);
            let recall = matched_fraction(reference, sketch, tolerance);
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub manifest: Manifest,
    pub dropped: usize,
    /// Set when nothing survived the threshold.
    pub empty: bool,
}

/// Scores every pair and keeps those with `quality_score >= threshold`.
/// `template` supplies class names, resolution and seed for the result.
pub fn score_and_filter(
    pairs: Vec<(ImageRecord, SketchRecord)>,
    threshold: f64,
    template: Manifest,
    cfg: &ExtractionConfig,
) -> Result<FilterOutcome> {
    if !(1.0..=5.0).contains(&threshold) {
        bail_config!("threshold must be in [1, 5], got {threshold}");
    }
    let total = pairs.len();
    let mut kept = Vec::with_capacity(total);
    for (img, mut sk) in pairs {
        let sal = estimate_saliency(&img);
        let reference = reference_edges(&img.pixels, &sal.mask, cfg);
        sk.quality_score = quality_score(&sk.pixels, &reference, cfg.match_tolerance);
        if sk.quality_score >= threshold {
            kept.push((img, sk));
        }
    }
    kept.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let dropped = total - kept.len();
    let empty = kept.is_empty();
    if empty {
        log::warn!("score_and_filter: no record reached threshold {threshold}");
    }
    Ok(FilterOutcome { manifest: Manifest { records: kept, ..template }, dropped, empty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::imaging::distance_transform;

    fn record(pixels: Raster, mask: Option<Mask>) -> ImageRecord {
        ImageRecord { id: "img".into(), class_label: 0, pixels, split: Split::Train, mask }
    }

    fn square_image() -> (Raster, Mask) {
        let mut img = Raster::filled(24, 24, 3, 1.0);
        let mut mask = Mask::new(24, 24);
        for y in 8..16 {
            for x in 8..16 {
                mask.set(y, x, true);
                for c in 0..3 {
                    img.set(y, x, c, 0.0);
                }
            }
        }
        (img, mask)
    }

    #[test]
    fn uniform_white_full_mask_has_no_strokes() {
        let rec = record(Raster::filled(16, 16, 3, 1.0), None);
        let sk = extract_pseudosketch(&rec, &Mask::full(16, 16), &ExtractionConfig::default()).unwrap();
        assert_eq!(sk.pixels.count(), 0);
    }

    #[test]
    fn square_strokes_follow_perimeter() {
        let (img, mask) = square_image();
        let rec = record(img, Some(mask.clone()));
        let sk = extract_pseudosketch(&rec, &mask, &ExtractionConfig::default()).unwrap();
        // perimeter = mask pixels with a 4-neighbour outside the mask
        let mut perimeter = Mask::new(24, 24);
        for (y, x) in mask.coords() {
            let outside = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)]
                .iter()
                .any(|(dy, dx)| !mask.get((y as i64 + dy) as usize, (x as i64 + dx) as usize));
            if outside {
                perimeter.set(y, x, true);
            }
        }
        let dist_to_perimeter = distance_transform(&perimeter).unwrap();
        let dist_to_stroke = distance_transform(&sk.pixels).unwrap();
        for (y, x) in sk.pixels.coords() {
            assert!(dist_to_perimeter.get(y, x) <= 1.0, "stroke at ({y},{x}) off the band");
        }
        for (y, x) in perimeter.coords() {
            assert!(dist_to_stroke.get(y, x) <= 1.5, "perimeter ({y},{x}) not covered");
        }
    }

    #[test]
    fn half_mask_suppresses_right_side() {
        let (img, _) = square_image();
        let mut left = Mask::new(24, 24);
        for y in 0..24 {
            for x in 0..12 {
                left.set(y, x, true);
            }
        }
        let cfg = ExtractionConfig::default();
        let sk = extract_pseudosketch(&record(img, None), &left, &cfg).unwrap();
        assert!(sk.pixels.count() > 0);
        let limit = 11.0 + cfg.blur_sigma;
        assert_eq!(sk.pixels.coords().filter(|&(_, x)| x as f64 > limit).count(), 0);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let rec = record(Raster::filled(8, 8, 3, 0.5), None);
        assert!(matches!(
            extract_pseudosketch(&rec, &Mask::new(8, 8), &ExtractionConfig::default()),
            Err(CogsError::EmptyMask)
        ));
    }

    #[test]
    fn constant_image_gets_full_frame_with_warning() {
        let s = heuristic_saliency(&Raster::filled(6, 6, 3, 0.5));
        assert_eq!(s.mask.count(), 36);
        assert!(s.warning.is_some());
    }

    #[test]
    fn heuristic_keeps_bright_centre_pixel() {
        let mut img = Raster::filled(5, 5, 3, 0.0);
        for c in 0..3 {
            img.set(2, 2, c, 1.0);
        }
        let s = heuristic_saliency(&img);
        assert!(s.mask.get(2, 2));
        assert!(s.warning.is_none());
        // hand evaluation: contrast is 24/25*sqrt(3) at the centre and sqrt(3)/25
        // elsewhere; the median is a corner-ring value, so only the centre and its
        // closest ring pixels can exceed it
        assert!(!s.mask.get(0, 0));
    }

    #[test]
    fn toy_images_use_ground_truth() {
        let (img, mask) = square_image();
        let s = estimate_saliency(&record(img, Some(mask.clone())));
        assert_eq!(s.mask, mask);
    }

    #[test]
    fn score_scale_endpoints_and_midpoint() {
        let mut reference = Mask::new(8, 8);
        for (y, x) in [(0, 0), (0, 1), (0, 6), (0, 7)] {
            reference.set(y, x, true);
        }
        // two strokes on the reference, two far from it: precision = recall = 0.5
        let mut half = Mask::new(8, 8);
        for (y, x) in [(0, 0), (0, 1), (7, 0), (7, 7)] {
            half.set(y, x, true);
        }
        for tol in [0.0, 1.5] {
            assert_eq!(quality_score(&reference, &reference, tol), 5.0);
            assert_eq!(quality_score(&Mask::new(8, 8), &reference, tol), 1.0);
            assert_eq!(quality_score(&half, &reference, tol), 3.0);
        }
    }

    #[test]
    fn one_pixel_shift_is_tolerated() {
        let mut a = Mask::new(8, 8);
        let mut b = Mask::new(8, 8);
        for y in 1..7 {
            a.set(y, 3, true);
            b.set(y, 4, true);
        }
        assert_eq!(quality_score(&a, &b, 0.0), 1.0);
        assert_eq!(quality_score(&a, &b, 1.5), 5.0);
    }

    #[test]
    fn filter_drops_below_threshold() {
        let (img, mask) = square_image();
        let rec = record(img.clone(), Some(mask.clone()));
        let good = extract_pseudosketch(&rec, &mask, &ExtractionConfig::default()).unwrap();
        let mut bad = good.clone();
        bad.pixels = Mask::new(24, 24);
        let mut rec2 = rec.clone();
        rec2.id = "img2".into();
        bad.source_image_id = "img2".into();
        let template = Manifest { records: vec![], class_names: vec!["a".into()], resolution: (24, 24), seed: 0 };
        let out = score_and_filter(vec![(rec, good), (rec2, bad)], 3.0, template, &ExtractionConfig::default()).unwrap();
        assert_eq!(out.manifest.len(), 1);
        assert_eq!(out.dropped, 1);
        assert!(out.manifest.records[0].1.quality_score >= 4.5);
    }
}
