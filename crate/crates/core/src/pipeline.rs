//! End-to-end composition: tokenise the inputs, sample, decode, and refine in
//! the per-class embedding spaces.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::dataset::{generate_toy_corpus, pair_styles, CorpusConfig, Manifest, Split};
use crate::error::{bail_config, CogsError, Result};
use crate::metrics::embed_features;
use crate::raster::Raster;
use crate::refine::{
    interpolate_at, interpolate_refine, train_refine_vae, EmbeddingIndex, EntrySource, InterpolationOutcome,
    LatentPoint, QualityReference, RefineCorpus, RefineTrainReport, RefineVae, VAEConfig,
};
use crate::style::{StyleConfig, StyleEncoder};
use crate::transformer::{
    build_condition, prepare_triples, train_transformer, CogsTransformer, TokenSequence, TransformerConfig,
    TransformerTrainReport,
};
use crate::vq::{train_vq, Domain, LatentGrid, TokenGrid, VQConfig, VqModel, VqTrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: 32 }
    }
}

/// Everything needed to reproduce a generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub sample_seed: u64,
    pub sampling: SamplingParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub tokens: TokenGrid,
    /// Decoded from `tokens` by the frozen image model.
    pub image: Raster,
    pub condition: TokenSequence,
    pub sample_seed: u64,
    pub provenance: Provenance,
}

/// The refinement model of one class and the statistics its quality filter uses.
#[derive(Clone, Debug)]
pub struct ClassRefiner {
    pub vae: RefineVae,
    pub quality: QualityReference,
}

impl ClassRefiner {
    /// Acceptance threshold: `multiplier` times the worst real-image score.
    pub fn threshold(&self, multiplier: f64) -> f64 {
        multiplier * self.quality.real_max
    }
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    class_names: Vec<String>,
    sketch_vq: VqModel,
    image_vq: VqModel,
    style: StyleEncoder,
    transformer: CogsTransformer,
    refiners: BTreeMap<usize, ClassRefiner>,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct PipelineHeader {
    class_names: Vec<String>,
    style: StyleConfig,
    refiners: Vec<(usize, QualityReference)>,
}

impl Pipeline {
    /// Assembles the models, checking that vocabularies, grids and class counts agree.
    pub fn new(
        class_names: Vec<String>,
        sketch_vq: VqModel,
        image_vq: VqModel,
        style: StyleEncoder,
        transformer: CogsTransformer,
        refiners: BTreeMap<usize, ClassRefiner>,
    ) -> Result<Self> {
        let t = transformer.config();
        let (sk, im) = (sketch_vq.config(), image_vq.config());
        let checks = [
            ("sketch model domain", (sketch_vq.domain() == Domain::Sketch) as usize, 1),
            ("image model domain", (image_vq.domain() == Domain::Image) as usize, 1),
            ("sketch vocabulary", t.sketch_vocab, sk.codebook_size),
            ("image vocabulary", t.image_vocab, im.codebook_size),
            ("sketch grid tokens", t.grid_tokens, sk.tokens()),
            ("image grid tokens", t.grid_tokens, im.tokens()),
            ("class count", t.n_classes, class_names.len()),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(CogsError::Config(format!("checkpoint mismatch: {what} is {got}, expected {want}")));
            }
        }
        let grid = (im.grid_size, im.grid_size, im.code_dim);
        for (&class, r) in &refiners {
            if class >= class_names.len() || r.vae.class_label() != class {
                return Err(CogsError::Config(format!("refinement model for class {class} is mislabelled")));
            }
            if r.vae.grid() != grid {
                return Err(CogsError::Config(format!(
                    "checkpoint mismatch: refinement model for class {class} expects grid {:?}, image model has {grid:?}",
                    r.vae.grid()
                )));
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&class_names)?);
        hasher.update(serde_json::to_vec(style.config())?);
        for archive in [sketch_vq.to_archive()?, image_vq.to_archive()?, transformer.to_archive()?] {
            hasher.update(archive.digest()?);
        }
        for (class, r) in &refiners {
            hasher.update(class.to_le_bytes());
            hasher.update(r.vae.to_archive()?.digest()?);
        }
        let config_hash = hex::encode(hasher.finalize());
        Ok(Self { class_names, sketch_vq, image_vq, style, transformer, refiners, config_hash })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn sketch_vq(&self) -> &VqModel {
        &self.sketch_vq
    }

    pub fn image_vq(&self) -> &VqModel {
        &self.image_vq
    }

    pub fn style(&self) -> &StyleEncoder {
        &self.style
    }

    pub fn transformer(&self) -> &CogsTransformer {
        &self.transformer
    }

    pub fn refiners(&self) -> &BTreeMap<usize, ClassRefiner> {
        &self.refiners
    }

    /// Digest over every model and the class list.
    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Resolution `(height, width)` of generated images.
    pub fn resolution(&self) -> (usize, usize) {
        let r = self.image_vq.config().resolution;
        (r, r)
    }

    pub fn refiner(&self, class: usize) -> Result<&ClassRefiner> {
        self.refiners
            .get(&class)
            .ok_or_else(|| CogsError::InvalidInput(format!("no refinement model for class {class}")))
    }

    pub fn condition(&self, sketch: &Raster, style: &Raster, class: usize) -> Result<TokenSequence> {
        let r = self.image_vq.config().resolution;
        if sketch.shape() != (r, r, 1) {
            return Err(CogsError::Shape(format!("sketch must be {r}x{r} with 1 channel, got {:?}", sketch.shape())));
        }
        if style.shape() != (r, r, 3) {
            return Err(CogsError::Shape(format!("style must be {r}x{r} with 3 channels, got {:?}", style.shape())));
        }
        build_condition(&self.sketch_vq, &self.image_vq, self.class_names.len(), sketch, style, class)
    }

    /// Samples and decodes one image per condition.
    pub fn generate_batch(
        &self,
        conditions: &[TokenSequence],
        sampling: SamplingParams,
        seeds: &[u64],
    ) -> Result<Vec<GenerationResult>> {
        let refs: Vec<&TokenSequence> = conditions.iter().collect();
        let tokens = self.transformer.sample_batch(&refs, sampling.temperature, sampling.top_k, seeds)?;
        let g = self.image_vq.config().grid_size;
        let grids = tokens.into_iter().map(|t| TokenGrid::new(g, g, t)).collect::<Result<Vec<_>>>()?;
        let images = self.image_vq.decode_batch(&grids.iter().collect::<Vec<_>>())?;
        Ok(grids
            .into_iter()
            .zip(images)
            .zip(conditions.iter().zip(seeds))
            .map(|((tokens, image), (condition, &seed))| GenerationResult {
                tokens,
                image,
                condition: condition.clone(),
                sample_seed: seed,
                provenance: Provenance { config_hash: self.config_hash.clone(), sample_seed: seed, sampling },
            })
            .collect())
    }

    pub fn generate(
        &self,
        sketch: &Raster,
        style: &Raster,
        class: usize,
        sampling: SamplingParams,
        seed: u64,
    ) -> Result<GenerationResult> {
        let cond = self.condition(sketch, style, class)?;
        Ok(self.generate_batch(&[cond], sampling, &[seed])?.remove(0))
    }

    fn latents(&self, tokens: &[&TokenGrid]) -> Result<Vec<LatentGrid>> {
        tokens.iter().map(|t| self.image_vq.latents_for(t)).collect()
    }

    /// Posterior of image token grids in the class's embedding space.
    pub fn embed_tokens(&self, class: usize, tokens: &[&TokenGrid]) -> Result<Vec<LatentPoint>> {
        let latents = self.latents(tokens)?;
        self.refiner(class)?.vae.encode_batch(&latents.iter().collect::<Vec<_>>())
    }

    /// Decodes a point of the class's embedding space to tokens and an image.
    pub fn decode_point(&self, class: usize, point: &[f64]) -> Result<(TokenGrid, Raster)> {
        let (_, tokens) = self.refiner(class)?.vae.decode(point, &self.image_vq.codebook()?)?;
        let image = self.image_vq.decode(&tokens)?;
        Ok((tokens, image))
    }

    /// Index of the class's images in `manifest`, keyed by image id.
    pub fn build_index(&self, class: usize, manifest: &Manifest) -> Result<EmbeddingIndex> {
        let vae = &self.refiner(class)?.vae;
        let images: Vec<_> = manifest.images().filter(|r| r.class_label == class).collect();
        let rasters: Vec<&Raster> = images.iter().map(|r| &r.pixels).collect();
        let tokens = self.image_vq.tokenize(&rasters)?;
        let points = self.embed_tokens(class, &tokens.iter().collect::<Vec<_>>())?;
        let mut index = EmbeddingIndex::new(class, vae.config().latent_dim);
        for (record, point) in images.iter().zip(points) {
            index.insert(record.id.clone(), point.mean, EntrySource::Real)?;
        }
        Ok(index)
    }

    fn interpolation_hooks(
        &self,
    ) -> (impl Fn(&[&TokenGrid]) -> Result<Vec<Raster>> + '_, impl Fn(&[&Raster]) -> Result<Vec<Vec<f64>>> + '_) {
        (move |g: &[&TokenGrid]| self.image_vq.decode_batch(g), move |r: &[&Raster]| embed_features(&self.style, r))
    }

    /// Decodes the path between two points at explicit parameters, without filtering.
    pub fn interpolate_at(&self, class: usize, from: &[f64], to: &[f64], ts: &[f64]) -> Result<InterpolationOutcome> {
        let refiner = self.refiner(class)?;
        let (render, features) = self.interpolation_hooks();
        interpolate_at(&refiner.vae, &self.image_vq.codebook()?, from, to, ts, render, features, None)
    }

    /// Interior samples on the path, kept when their quality score is within
    /// `multiplier` times the worst real-image score of the class.
    pub fn interpolate(
        &self,
        class: usize,
        from: &[f64],
        to: &[f64],
        n_samples: usize,
        multiplier: Option<f64>,
    ) -> Result<InterpolationOutcome> {
        let refiner = self.refiner(class)?;
        let (render, features) = self.interpolation_hooks();
        let quality = multiplier.map(|m| (&refiner.quality, refiner.threshold(m)));
        interpolate_refine(&refiner.vae, &self.image_vq.codebook()?, from, to, n_samples, render, features, quality)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.sketch_vq.to_archive()?.save(dir.join("sketch_vq.cogs"))?;
        self.image_vq.to_archive()?.save(dir.join("image_vq.cogs"))?;
        self.transformer.to_archive()?.save(dir.join("transformer.cogs"))?;
        for (class, r) in &self.refiners {
            r.vae.to_archive()?.save(dir.join(format!("refine_{class}.cogs")))?;
        }
        let header = PipelineHeader {
            class_names: self.class_names.clone(),
            style: self.style.config().clone(),
            refiners: self.refiners.iter().map(|(&c, r)| (c, r.quality.clone())).collect(),
        };
        std::fs::write(dir.join("pipeline.json"), serde_json::to_vec_pretty(&header)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header: PipelineHeader = serde_json::from_slice(&std::fs::read(dir.join("pipeline.json"))?)?;
        let sketch_vq = VqModel::from_archive(&Archive::load(dir.join("sketch_vq.cogs"))?)?;
        let image_vq = VqModel::from_archive(&Archive::load(dir.join("image_vq.cogs"))?)?;
        let transformer = CogsTransformer::from_archive(&Archive::load(dir.join("transformer.cogs"))?)?;
        let mut refiners = BTreeMap::new();
        for (class, quality) in header.refiners {
            let vae = RefineVae::from_archive(&Archive::load(dir.join(format!("refine_{class}.cogs")))?)?;
            refiners.insert(class, ClassRefiner { vae, quality });
        }
        Self::new(header.class_names, sketch_vq, image_vq, StyleEncoder::new(header.style)?, transformer, refiners)
    }
}

/// How positive groups for the refinement models are synthesised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineCorpusConfig {
    /// Generations per sketch, each under a different style image of the class.
    pub styles_per_sketch: usize,
    pub sampling: SamplingParams,
    pub seed: u64,
}

impl Default for RefineCorpusConfig {
    fn default() -> Self {
        Self { styles_per_sketch: 8, sampling: SamplingParams { temperature: 1.0, top_k: 1 }, seed: 0 }
    }
}

/// Generates every sketch of `class` in `manifest` under several styles of the
/// same class, grouping the quantised latents by sketch.
pub fn synthesize_refine_corpus(
    transformer: &CogsTransformer,
    sketch_vq: &VqModel,
    image_vq: &VqModel,
    manifest: &Manifest,
    class: usize,
    cfg: &RefineCorpusConfig,
) -> Result<RefineCorpus> {
    if cfg.styles_per_sketch < 2 {
        bail_config!("styles_per_sketch must be >= 2, got {}", cfg.styles_per_sketch);
    }
    let records: Vec<_> = manifest.records.iter().filter(|(img, _)| img.class_label == class).collect();
    if records.len() < cfg.styles_per_sketch {
        return Err(CogsError::InvalidInput(format!(
            "class {class} has {} images, fewer than {} styles per sketch",
            records.len(),
            cfg.styles_per_sketch
        )));
    }
    let sketches: Vec<Raster> = records.iter().map(|(_, sk)| Raster::from_mask(&sk.pixels)).collect();
    let sketch_tokens = sketch_vq.tokenize(&sketches.iter().collect::<Vec<_>>())?;
    let style_tokens = image_vq.tokenize(&records.iter().map(|(img, _)| &img.pixels).collect::<Vec<_>>())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut conds = Vec::new();
    for (i, sk) in sketch_tokens.iter().enumerate() {
        let others = sample_indices(&mut rng, records.len() - 1, cfg.styles_per_sketch);
        for j in others.iter() {
            let j = if j >= i { j + 1 } else { j };
            conds.push(TokenSequence {
                sketch_tokens: sk.indices.clone(),
                style_tokens: style_tokens[j].indices.clone(),
                class_token: class as u32,
            });
        }
    }
    let seeds: Vec<u64> = (0..conds.len() as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let refs: Vec<&TokenSequence> = conds.iter().collect();
    let tokens = transformer.sample_batch(&refs, cfg.sampling.temperature, cfg.sampling.top_k, &seeds)?;
    let g = image_vq.config().grid_size;
    let mut groups = Vec::with_capacity(sketch_tokens.len());
    for chunk in tokens.chunks(cfg.styles_per_sketch) {
        let group = chunk
            .iter()
            .map(|t| image_vq.latents_for(&TokenGrid::new(g, g, t.clone())?))
            .collect::<Result<Vec<_>>>()?;
        groups.push(group);
    }
    Ok(RefineCorpus { groups })
}

/// Configuration of a full training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub style: StyleConfig,
    pub sketch_vq: VQConfig,
    pub image_vq: VQConfig,
    /// Vocabulary sizes, class count and grid length are taken from the other models.
    pub transformer: TransformerConfig,
    pub vae: VAEConfig,
    pub refine_corpus: RefineCorpusConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PipelineReport {
    pub sketch_vq: VqTrainReport,
    pub image_vq: VqTrainReport,
    pub transformer: TransformerTrainReport,
    pub refiners: BTreeMap<usize, RefineTrainReport>,
}

/// Fills in the transformer fields that other models determine.
pub fn derived_transformer_config(
    base: &TransformerConfig,
    sketch: &VQConfig,
    image: &VQConfig,
    n_classes: usize,
) -> TransformerConfig {
    let grid_tokens = image.tokens();
    TransformerConfig {
        sketch_vocab: sketch.codebook_size,
        image_vocab: image.codebook_size,
        n_classes,
        grid_tokens,
        context_length: base.context_length.max(3 * grid_tokens + 1),
        ..base.clone()
    }
}

/// Trains the refinement model and quality reference of one class.
pub fn train_class_refiner(
    transformer: &CogsTransformer,
    sketch_vq: &VqModel,
    image_vq: &VqModel,
    style: &StyleEncoder,
    train: &Manifest,
    class: usize,
    vae: &VAEConfig,
    corpus: &RefineCorpusConfig,
) -> Result<(ClassRefiner, RefineTrainReport)> {
    let data = synthesize_refine_corpus(transformer, sketch_vq, image_vq, train, class, corpus)?;
    let im = image_vq.config();
    let (vae, report) = train_refine_vae(class, &data, (im.grid_size, im.grid_size, im.code_dim), vae)?;
    let real: Vec<&Raster> = train.images().filter(|r| r.class_label == class).map(|r| &r.pixels).collect();
    let quality = QualityReference::fit(&embed_features(style, &real)?)?;
    Ok((ClassRefiner { vae, quality }, report))
}

/// Trains every model on the training split of `manifest`.
pub fn train_pipeline(manifest: &Manifest, cfg: &PipelineConfig) -> Result<(Pipeline, PipelineReport)> {
    let style = StyleEncoder::new(cfg.style.clone())?;
    log::info!("training sketch model");
    let (sketch_vq, sketch_report) = train_vq(manifest, Domain::Sketch, &cfg.sketch_vq, &style)?;
    log::info!("training image model");
    let (image_vq, image_report) = train_vq(manifest, Domain::Image, &cfg.image_vq, &style)?;
    let train = manifest.split(Split::Train);
    let pairing = pair_styles(&train, &style)?;
    for w in &pairing.warnings {
        log::warn!("{w}");
    }
    let data = prepare_triples(&train, &pairing.triples, &sketch_vq, &image_vq, &style)?;
    let tcfg = derived_transformer_config(&cfg.transformer, &cfg.sketch_vq, &cfg.image_vq, manifest.n_classes());
    log::info!("training transformer on {} triples", data.len());
    let (transformer, transformer_report) = train_transformer(&data, &tcfg, &image_vq, &style)?;
    let mut refiners = BTreeMap::new();
    let mut refine_reports = BTreeMap::new();
    for class in 0..manifest.n_classes() {
        log::info!("training refinement model for class {class}");
        let (r, report) = train_class_refiner(
            &transformer,
            &sketch_vq,
            &image_vq,
            &style,
            &train,
            class,
            &cfg.vae,
            &cfg.refine_corpus,
        )?;
        refiners.insert(class, r);
        refine_reports.insert(class, report);
    }
    let pipeline = Pipeline::new(manifest.class_names.clone(), sketch_vq, image_vq, style, transformer, refiners)?;
    let report = PipelineReport {
        sketch_vq: sketch_report,
        image_vq: image_report,
        transformer: transformer_report,
        refiners: refine_reports,
    };
    Ok((pipeline, report))
}

/// Generates the toy corpus described by `cfg` and trains on it.
pub fn train_toy_pipeline(cfg: &PipelineConfig) -> Result<(Manifest, Pipeline, PipelineReport)> {
    let manifest = generate_toy_corpus(&cfg.corpus)?;
    let (pipeline, report) = train_pipeline(&manifest, cfg)?;
    Ok((manifest, pipeline, report))
}

/// Retrains the refinement model of one class against the pipeline's transformer.
pub fn retrain_refiner(
    pipeline: &Pipeline,
    manifest: &Manifest,
    class: usize,
    cfg: &PipelineConfig,
) -> Result<(Pipeline, RefineTrainReport)> {
    if class >= pipeline.class_names.len() {
        return Err(CogsError::InvalidInput(format!("class {class} out of range")));
    }
    let train = manifest.split(Split::Train);
    let (refiner, report) = train_class_refiner(
        &pipeline.transformer,
        &pipeline.sketch_vq,
        &pipeline.image_vq,
        &pipeline.style,
        &train,
        class,
        &cfg.vae,
        &cfg.refine_corpus,
    )?;
    let mut refiners = pipeline.refiners.clone();
    refiners.insert(class, refiner);
    let rebuilt = Pipeline::new(
        pipeline.class_names.clone(),
        pipeline.sketch_vq.clone(),
        pipeline.image_vq.clone(),
        pipeline.style.clone(),
        pipeline.transformer.clone(),
        refiners,
    )?;
    Ok((rebuilt, report))
}
