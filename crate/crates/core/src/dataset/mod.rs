//! Paired sketch / image / style corpus.
//!
//! On disk a corpus lives under one root:
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<image id>.png     RGB, 8-bit
//! <root>/sketches/<sketch id>.png  1 channel, 0 or 255
//! <root>/masks/<image id>.png      1 channel, ground-truth saliency (toy corpus only)
//! ```

mod pairing;
mod sketch;
mod toy;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CogsError, Result};
use crate::raster::{Mask, Raster};

pub use pairing::{pair_styles, PairingOutcome, StyleEmbedder, Triple};
pub use sketch::{
    estimate_saliency, extract_pseudosketch, heuristic_saliency, quality_score, reference_edges, score_and_filter,
    ExtractionConfig, FilterOutcome, Saliency,
};
pub use toy::{generate_toy_corpus, CorpusConfig, ShapeFamily, DEFAULT_PALETTE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub class_label: usize,
    pub pixels: Raster,
    pub split: Split,
    /// Ground-truth object mask when the image was rendered procedurally.
    pub mask: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SketchRecord {
    pub id: String,
    pub source_image_id: String,
    pub pixels: Mask,
    /// Edge-agreement score on the 1..=5 scale; 1 until scored.
    pub quality_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<(ImageRecord, SketchRecord)>,
    pub class_names: Vec<String>,
    pub resolution: (usize, usize),
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    id: String,
    class_label: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct SketchMeta {
    id: String,
    source_image_id: String,
    quality_score: f64,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    image: ImageMeta,
    sketch: SketchMeta,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    class_names: Vec<String>,
    resolution: (usize, usize),
    seed: u64,
    records: Vec<RecordMeta>,
}

impl Manifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().map(|(i, _)| i)
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images().find(|r| r.id == id)
    }

    pub fn sketch(&self, id: &str) -> Option<&SketchRecord> {
        self.records.iter().map(|(_, s)| s).find(|s| s.id == id)
    }

    pub fn sketch_for_image(&self, image_id: &str) -> Option<&SketchRecord> {
        self.records.iter().find(|(i, _)| i.id == image_id).map(|(_, s)| s)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Subset with only the given split; metadata is shared.
    pub fn split(&self, split: Split) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|(i, _)| i.split == split).cloned().collect(),
            class_names: self.class_names.clone(),
            resolution: self.resolution,
            seed: self.seed,
        }
    }

    /// Checks the documented invariants: unique ids, resolvable sketches,
    /// dense class labels, corpus-wide resolution, pixels in range.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        let (h, w) = self.resolution;
        for (img, sk) in &self.records {
            if !ids.insert(img.id.as_str()) {
                return Err(CogsError::InvalidInput(format!("duplicate image id `{}`", img.id)));
            }
            if sk.source_image_id != img.id {
                return Err(CogsError::InvalidInput(format!("sketch `{}` does not resolve to `{}`", sk.id, img.id)));
            }
            if img.class_label >= self.n_classes() {
                return Err(CogsError::InvalidInput(format!("class {} out of range", img.class_label)));
            }
            if (img.pixels.height, img.pixels.width) != (h, w) || (sk.pixels.height, sk.pixels.width) != (h, w) {
                return Err(CogsError::Shape(format!("record `{}` is not {h}x{w}", img.id)));
            }
            if img.pixels.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CogsError::InvalidInput(format!("pixels of `{}` outside [0,1]", img.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        std::fs::create_dir_all(root.join("images"))?;
        std::fs::create_dir_all(root.join("sketches"))?;
        let mut metas = Vec::with_capacity(self.records.len());
        for (img, sk) in &self.records {
            img.pixels.save_png(root.join("images").join(format!("{}.png", img.id)))?;
            Raster::from_mask(&sk.pixels).save_png(root.join("sketches").join(format!("{}.png", sk.id)))?;
            if let Some(mask) = &img.mask {
                std::fs::create_dir_all(root.join("masks"))?;
                Raster::from_mask(mask).save_png(root.join("masks").join(format!("{}.png", img.id)))?;
            }
            metas.push(RecordMeta {
                image: ImageMeta { id: img.id.clone(), class_label: img.class_label, split: img.split },
                sketch: SketchMeta {
                    id: sk.id.clone(),
                    source_image_id: sk.source_image_id.clone(),
                    quality_score: sk.quality_score,
                },
            });
        }
        let file = ManifestFile {
            class_names: self.class_names.clone(),
            resolution: self.resolution,
            seed: self.seed,
            records: metas,
        };
        std::fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Manifest> {
        let root = root.as_ref();
        let file: ManifestFile = serde_json::from_slice(&std::fs::read(root.join("manifest.json"))?)?;
        let mut records = Vec::with_capacity(file.records.len());
        for r in file.records {
            let pixels = Raster::load_png(root.join("images").join(format!("{}.png", r.image.id)), 3)?;
            let sk = Raster::load_png(root.join("sketches").join(format!("{}.png", r.sketch.id)), 1)?;
            let mask_path = root.join("masks").join(format!("{}.png", r.image.id));
            let mask = if mask_path.exists() { Some(Mask::from_raster(&Raster::load_png(mask_path, 1)?)?) } else { None };
            records.push((
                ImageRecord { id: r.image.id, class_label: r.image.class_label, pixels, split: r.image.split, mask },
                SketchRecord {
                    id: r.sketch.id,
                    source_image_id: r.sketch.source_image_id,
                    pixels: Mask::from_raster(&sk)?,
                    quality_score: r.sketch.quality_score,
                },
            ));
        }
        let m = Manifest { records, class_names: file.class_names, resolution: file.resolution, seed: file.seed };
        m.validate()?;
        Ok(m)
    }
}
