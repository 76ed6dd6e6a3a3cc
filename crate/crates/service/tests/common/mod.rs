#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cogs_core::dataset::{CorpusConfig, Manifest, Split};
use cogs_core::pipeline::{train_toy_pipeline, Pipeline, PipelineConfig, RefineCorpusConfig, SamplingParams};
use cogs_core::raster::Raster;
use cogs_core::refine::VAEConfig;
use cogs_core::transformer::TransformerConfig;
use cogs_core::vq::VQConfig;
use cogs_service::api::router;
use cogs_service::config::RunConfig;
use cogs_service::state::AppState;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub struct Fixture {
    pub manifest: Manifest,
    pub pipeline: Pipeline,
    pub config: RunConfig,
    _dir: tempfile::TempDir,
}

pub fn tiny_config() -> PipelineConfig {
    let vq = VQConfig {
        resolution: 32,
        grid_size: 4,
        code_dim: 8,
        codebook_size: 16,
        hidden_channels: 8,
        batch_size: 8,
        epochs: 1,
        ..VQConfig::default()
    };
    PipelineConfig {
        corpus: CorpusConfig { n_classes: 2, per_class_count: 12, resolution: 32, val_fraction: 0.5, ..CorpusConfig::default() },
        sketch_vq: vq.clone(),
        image_vq: vq,
        transformer: TransformerConfig { layers: 1, heads: 1, embed_dim: 16, epochs: 1, batch_size: 8, top_k: 4, ..TransformerConfig::default() },
        vae: VAEConfig {
            latent_dim: 3,
            hidden: 8,
            cell_channels: 2,
            stage1_max_epochs: 1,
            stage2_epochs: 1,
            batch_groups: 2,
            ..VAEConfig::default()
        },
        refine_corpus: RefineCorpusConfig { styles_per_sketch: 2, ..RefineCorpusConfig::default() },
        ..PipelineConfig::default()
    }
}

/// A tiny pipeline trained once per test binary and saved under a temporary directory.
pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let training = tiny_config();
        let (manifest, pipeline, _) = train_toy_pipeline(&training).expect("training the fixture");
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            model_dir: dir.path().join("models"),
            data_dir: dir.path().join("data"),
            sampling: SamplingParams { temperature: 1.0, top_k: 4 },
            style_shortlist: 3,
            training,
            ..RunConfig::default()
        };
        pipeline.save(&config.model_dir).unwrap();
        manifest.save(&config.data_dir).unwrap();
        Fixture { manifest, pipeline, config, _dir: dir }
    })
}

pub fn app() -> (Router, Arc<AppState>) {
    let f = fixture();
    let state = Arc::new(AppState::new(f.pipeline.clone(), f.manifest.clone(), f.config.clone()).unwrap());
    (router(state.clone()), state)
}

pub fn png(raster: &Raster) -> String {
    STANDARD.encode(raster.to_png_bytes().unwrap())
}

/// A validation sketch and a style image of `class`.
pub fn inputs(class: usize) -> (String, String) {
    let val = fixture().manifest.split(Split::Val);
    let mut records = val.records.iter().filter(|(img, _)| img.class_label == class);
    let (_, sketch) = records.next().unwrap();
    let (style, _) = records.next().unwrap();
    (png(&Raster::from_mask(&sketch.pixels)), png(&style.pixels))
}

pub fn val_ids(class: usize) -> Vec<String> {
    fixture().manifest.split(Split::Val).images().filter(|r| r.class_label == class).map(|r| r.id.clone()).collect()
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}
