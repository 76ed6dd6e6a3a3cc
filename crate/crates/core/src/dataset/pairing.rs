use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ImageRecord, Manifest};
use crate::error::Result;

/// Anything that maps an image to a fixed-length style vector.
pub trait StyleEmbedder {
    fn embed_image(&self, image: &ImageRecord) -> Result<Vec<f64>>;
}

impl<F> StyleEmbedder for F
where
    F: Fn(&ImageRecord) -> Result<Vec<f64>>,
{
    fn embed_image(&self, image: &ImageRecord) -> Result<Vec<f64>> {
        self(image)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub sketch_id: String,
    pub style_image_id: String,
    pub target_image_id: String,
    pub class_label: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PairingOutcome {
    pub triples: Vec<Triple>,
    pub warnings: Vec<String>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Pairs every target with its nearest same-class style neighbour.
///
/// Ties go to the lexicographically smallest id. Targets are emitted in id order.
pub fn pair_styles(manifest: &Manifest, embedder: &dyn StyleEmbedder) -> Result<PairingOutcome> {
    let mut by_class: BTreeMap<usize, Vec<(&str, Vec<f64>, &str)>> = BTreeMap::new();
    for (img, sk) in &manifest.records {
        let e = embedder.embed_image(img)?;
        by_class.entry(img.class_label).or_default().push((img.id.as_str(), e, sk.id.as_str()));
    }
    let mut out = PairingOutcome::default();
    for (class, mut members) in by_class {
        members.sort_by(|a, b| a.0.cmp(b.0));
        if members.len() < 2 {
            for (id, _, _) in &members {
                out.warnings.push(format!("image `{id}` is alone in class {class}; skipped"));
            }
            continue;
        }
        for (i, (id, e, sk)) in members.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, (_, f, _)) in members.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = sq_dist(e, f);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            let (j, _) = best.expect("class has at least two members");
            out.triples.push(Triple {
                sketch_id: sk.to_string(),
                style_image_id: members[j].0.to_string(),
                target_image_id: id.to_string(),
                class_label: class,
            });
        }
    }
    out.triples.sort_by(|a, b| a.target_image_id.cmp(&b.target_image_id));
    for w in &out.warnings {
        log::warn!("{w}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SketchRecord, Split};
    use crate::raster::{Mask, Raster};

    /// One record per `(id, class, position)`; the embedding is the first pixel value.
    fn manifest(points: &[(&str, usize, f32)]) -> Manifest {
        let records = points
            .iter()
            .map(|&(id, class, v)| {
                (
                    ImageRecord {
                        id: id.into(),
                        class_label: class,
                        pixels: Raster::filled(2, 2, 3, v),
                        split: Split::Train,
                        mask: None,
                    },
                    SketchRecord {
                        id: format!("sk-{id}"),
                        source_image_id: id.into(),
                        pixels: Mask::new(2, 2),
                        quality_score: 5.0,
                    },
                )
            })
            .collect();
        Manifest { records, class_names: vec!["a".into(), "b".into()], resolution: (2, 2), seed: 0 }
    }

    fn first_pixel(img: &ImageRecord) -> Result<Vec<f64>> {
        Ok(vec![img.pixels.data[0] as f64 * 100.0])
    }

    fn partner(out: &PairingOutcome, target: &str) -> String {
        out.triples.iter().find(|t| t.target_image_id == target).unwrap().style_image_id.clone()
    }

    #[test]
    fn two_images_pair_with_each_other() {
        let out = pair_styles(&manifest(&[("x", 0, 0.1), ("y", 0, 0.5)]), &first_pixel).unwrap();
        assert_eq!(partner(&out, "x"), "y");
        assert_eq!(partner(&out, "y"), "x");
    }

    #[test]
    fn line_example_matches_brute_force() {
        let out = pair_styles(&manifest(&[("p0", 0, 0.0), ("p1", 0, 0.01), ("p10", 0, 0.1)]), &first_pixel).unwrap();
        assert_eq!(partner(&out, "p0"), "p1");
        assert_eq!(partner(&out, "p1"), "p0");
        assert_eq!(partner(&out, "p10"), "p1");
    }

    #[test]
    fn never_pairs_across_classes() {
        let m = manifest(&[("a1", 0, 0.0), ("a2", 0, 0.9), ("b1", 1, 0.01), ("b2", 1, 0.5)]);
        let out = pair_styles(&m, &first_pixel).unwrap();
        assert_eq!(partner(&out, "a1"), "a2");
        for t in &out.triples {
            let s = m.image(&t.style_image_id).unwrap();
            assert_eq!(s.class_label, t.class_label);
            assert_ne!(t.style_image_id, t.target_image_id);
        }
    }

    #[test]
    fn ties_prefer_smallest_id() {
        let out = pair_styles(&manifest(&[("m", 0, 0.5), ("z", 0, 0.75), ("b", 0, 0.25)]), &first_pixel).unwrap();
        assert_eq!(partner(&out, "m"), "b");
    }

    #[test]
    fn singleton_class_is_skipped_with_warning() {
        let out = pair_styles(&manifest(&[("a1", 0, 0.0), ("a2", 0, 0.1), ("b1", 1, 0.0)]), &first_pixel).unwrap();
        assert_eq!(out.triples.len(), 2);
        assert_eq!(out.warnings.len(), 1);
    }
}
