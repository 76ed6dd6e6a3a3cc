//! Offline operations behind the command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cogs_core::archive::Archive;
use cogs_core::dataset::{generate_toy_corpus, pair_styles, Manifest, Split};
use cogs_core::eval::{evaluate, EvalSuite};
use cogs_core::pipeline::{derived_transformer_config, retrain_refiner, train_pipeline, Pipeline};
use cogs_core::raster::Raster;
use cogs_core::refine::{retrieve, RetrievalOutcome};
use cogs_core::style::StyleEncoder;
use cogs_core::transformer::{prepare_triples, train_transformer};
use cogs_core::vq::{train_vq, Domain, VqModel};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::ServiceError;
use crate::state::index_path;

type Result<T> = std::result::Result<T, ServiceError>;

pub fn vq_path(model_dir: &Path, domain: Domain) -> PathBuf {
    model_dir.join(match domain {
        Domain::Sketch => "sketch_vq.cogs",
        Domain::Image => "image_vq.cogs",
    })
}

/// Generates the synthetic corpus and writes it under `out`.
pub fn build_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let manifest = generate_toy_corpus(&cfg.training.corpus)?;
    manifest.save(out)?;
    Ok(manifest)
}

fn manifest(cfg: &RunConfig) -> Result<Manifest> {
    Ok(Manifest::load(&cfg.data_dir)?)
}

/// Rewrites the persisted retrieval index of every refinable class from the
/// validation images.
fn write_indices(cfg: &RunConfig, pipeline: &Pipeline, manifest: &Manifest, classes: &[usize]) -> Result<()> {
    let val = manifest.split(Split::Val);
    for &class in classes {
        pipeline.build_index(class, &val)?.to_archive()?.save(index_path(&cfg.model_dir, class))?;
    }
    Ok(())
}

/// Trains every model and saves the pipeline.
pub fn train_all(cfg: &RunConfig) -> Result<Value> {
    let manifest = manifest(cfg)?;
    let (pipeline, report) = train_pipeline(&manifest, &cfg.training)?;
    pipeline.save(&cfg.model_dir)?;
    write_indices(cfg, &pipeline, &manifest, &pipeline.refiners().keys().copied().collect::<Vec<_>>())?;
    Ok(json!({ "config_hash": pipeline.config_hash(), "report": report }))
}

/// Trains one tokeniser and saves its checkpoint.
pub fn train_vq_stage(cfg: &RunConfig, domain: Domain) -> Result<Value> {
    let manifest = manifest(cfg)?;
    let style = StyleEncoder::new(cfg.training.style.clone())?;
    let vq_cfg = match domain {
        Domain::Sketch => &cfg.training.sketch_vq,
        Domain::Image => &cfg.training.image_vq,
    };
    let (model, report) = train_vq(&manifest, domain, vq_cfg, &style)?;
    std::fs::create_dir_all(&cfg.model_dir).map_err(cogs_core::CogsError::from)?;
    model.to_archive()?.save(vq_path(&cfg.model_dir, domain))?;
    Ok(json!({ "domain": domain, "report": report }))
}

/// Trains the transformer against saved tokenisers. Refinement models are
/// dropped because their corpora came from the previous transformer.
pub fn train_transformer_stage(cfg: &RunConfig) -> Result<Value> {
    let manifest = manifest(cfg)?;
    let style = StyleEncoder::new(cfg.training.style.clone())?;
    let sketch_vq = VqModel::from_archive(&Archive::load(vq_path(&cfg.model_dir, Domain::Sketch))?)?;
    let image_vq = VqModel::from_archive(&Archive::load(vq_path(&cfg.model_dir, Domain::Image))?)?;
    let train = manifest.split(Split::Train);
    let pairing = pair_styles(&train, &style)?;
    for w in &pairing.warnings {
        log::warn!("{w}");
    }
    let data = prepare_triples(&train, &pairing.triples, &sketch_vq, &image_vq, &style)?;
    let tcfg =
        derived_transformer_config(&cfg.training.transformer, sketch_vq.config(), image_vq.config(), manifest.n_classes());
    let (transformer, report) = train_transformer(&data, &tcfg, &image_vq, &style)?;
    let pipeline = Pipeline::new(manifest.class_names.clone(), sketch_vq, image_vq, style, transformer, BTreeMap::new())?;
    pipeline.save(&cfg.model_dir)?;
    Ok(json!({ "config_hash": pipeline.config_hash(), "report": report }))
}

/// Trains the refinement model of one class against the saved pipeline.
pub fn train_vae_stage(cfg: &RunConfig, class: &str) -> Result<Value> {
    let manifest = manifest(cfg)?;
    let pipeline = Pipeline::load(&cfg.model_dir)?;
    let c = class_index(&pipeline, class)?;
    let (pipeline, report) = retrain_refiner(&pipeline, &manifest, c, &cfg.training)?;
    pipeline.save(&cfg.model_dir)?;
    write_indices(cfg, &pipeline, &manifest, &[c])?;
    Ok(json!({ "class": class, "config_hash": pipeline.config_hash(), "report": report }))
}

pub fn class_index(pipeline: &Pipeline, class: &str) -> Result<usize> {
    pipeline
        .class_index(class)
        .ok_or_else(|| ServiceError::BadRequest(format!("unknown class `{class}`")))
}

pub fn load_pipeline(cfg: &RunConfig) -> Result<Pipeline> {
    Ok(Pipeline::load(&cfg.model_dir)?)
}

/// Samples one image for a sketch and style image read from disk.
pub fn generate_file(
    cfg: &RunConfig,
    sketch: &Path,
    style: &Path,
    class: &str,
    seed: u64,
    out: &Path,
) -> Result<Value> {
    let pipeline = load_pipeline(cfg)?;
    let c = class_index(&pipeline, class)?;
    let result = pipeline.generate(&Raster::load_png(sketch, 1)?, &Raster::load_png(style, 3)?, c, cfg.sampling, seed)?;
    result.image.save_png(out)?;
    Ok(json!({ "out": out, "seed": seed, "config_hash": pipeline.config_hash(), "sampling": cfg.sampling }))
}

fn load_index(cfg: &RunConfig, pipeline: &Pipeline, class: usize) -> Result<cogs_core::refine::EmbeddingIndex> {
    let path = index_path(&cfg.model_dir, class);
    if path.is_file() {
        return Ok(cogs_core::refine::EmbeddingIndex::from_archive(&Archive::load(path)?)?);
    }
    Ok(pipeline.build_index(class, &manifest(cfg)?.split(Split::Val))?)
}

fn embed_query(pipeline: &Pipeline, class: usize, query: &Path) -> Result<Vec<f64>> {
    let tokens = pipeline.image_vq().tokenize(&[&Raster::load_png(query, 3)?])?;
    Ok(pipeline.embed_tokens(class, &[&tokens[0]])?.remove(0).mean)
}

/// Nearest indexed images to a query image.
pub fn retrieve_file(cfg: &RunConfig, query: &Path, class: &str, k: usize) -> Result<RetrievalOutcome> {
    let pipeline = load_pipeline(cfg)?;
    let c = class_index(&pipeline, class)?;
    let index = load_index(cfg, &pipeline, c)?;
    Ok(retrieve(&embed_query(&pipeline, c, query)?, &index, k)?)
}

/// Filtered interior samples between a query image and an indexed neighbour,
/// written as `interp_<i>.png` under `out`.
pub fn interpolate_file(
    cfg: &RunConfig,
    query: &Path,
    class: &str,
    neighbor: &str,
    samples: usize,
    out: &Path,
) -> Result<Value> {
    let pipeline = load_pipeline(cfg)?;
    let c = class_index(&pipeline, class)?;
    let index = load_index(cfg, &pipeline, c)?;
    let to = index
        .get(neighbor)
        .ok_or_else(|| ServiceError::NotFound(format!("`{neighbor}` is not in the index of `{class}`")))?
        .mean
        .clone();
    let from = embed_query(&pipeline, c, query)?;
    let outcome = pipeline.interpolate(c, &from, &to, samples, Some(cfg.quality_multiplier))?;
    std::fs::create_dir_all(out).map_err(cogs_core::CogsError::from)?;
    let mut written = Vec::new();
    for (i, s) in outcome.survivors.iter().enumerate() {
        let path = out.join(format!("interp_{i:03}.png"));
        s.image.save_png(&path)?;
        written.push(json!({ "t": s.t, "quality": s.quality, "distance": s.distance, "path": path }));
    }
    Ok(json!({ "requested": outcome.requested, "empty": outcome.empty, "results": written }))
}

/// Runs one evaluation suite and writes its report to `out`.
pub fn eval_suite(cfg: &RunConfig, suite: EvalSuite, out: &Path) -> Result<Value> {
    let pipeline = load_pipeline(cfg)?;
    let report = evaluate(&pipeline, &manifest(cfg)?, suite, &cfg.eval)?;
    std::fs::write(out, serde_json::to_vec_pretty(&report).map_err(cogs_core::CogsError::from)?)
        .map_err(cogs_core::CogsError::from)?;
    Ok(report)
}

