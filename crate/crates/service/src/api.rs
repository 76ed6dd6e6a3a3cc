//! HTTP routes. Model work runs on the blocking pool; index and session
//! writes go through the store's write lock.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cogs_core::pipeline::SamplingParams;
use cogs_core::raster::Raster;
use cogs_core::refine::{retrieve, EntrySource};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ServiceError;
use crate::state::{tokens_digest, AppState, ClassRef, GenerationRecord, SharedState};

type ApiResult<T> = Result<Json<T>, ServiceError>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/classes", get(classes))
        .route("/styles", get(styles))
        .route("/generate", post(generate))
        .route("/retrieve", post(retrieve_neighbors))
        .route("/interpolate", post(interpolate))
        .route("/generations/{id}", get(generation))
        .with_state(state)
}

async fn blocking<T, F>(state: SharedState, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

pub fn encode_png(raster: &Raster) -> Result<String, ServiceError> {
    Ok(STANDARD.encode(raster.to_png_bytes()?))
}

/// Decodes a base64 PNG, with or without a `data:` URL prefix.
pub fn decode_png(payload: &str, channels: usize, what: &str) -> Result<Raster, ServiceError> {
    let b64 = payload.split_once("base64,").map_or(payload, |(_, rest)| rest);
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| ServiceError::BadRequest(format!("{what} is not valid base64: {e}")))?;
    Raster::from_png_bytes(&bytes, channels).map_err(|e| ServiceError::BadRequest(format!("{what} is not a valid PNG: {e}")))
}

async fn health(State(state): State<SharedState>) -> Json<Value> {
    Json(json!({ "status": "ok", "config_hash": state.pipeline.config_hash() }))
}

async fn classes(State(state): State<SharedState>) -> Json<Value> {
    let store = state.read();
    let classes: Vec<Value> = state
        .pipeline
        .class_names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            json!({
                "index": i,
                "name": name,
                "refinable": state.pipeline.refiners().contains_key(&i),
                "indexed": store.indices.get(&i).map_or(0, |x| x.len()),
            })
        })
        .collect();
    Json(json!({ "classes": classes, "resolution": state.pipeline.resolution().0 }))
}

#[derive(Debug, Deserialize)]
pub struct StylesQuery {
    pub class: String,
}

async fn styles(State(state): State<SharedState>, Query(q): Query<StylesQuery>) -> ApiResult<Value> {
    blocking(state, move |s| {
        let class = s.class(&ClassRef::Name(q.class))?;
        let gallery = &s.galleries[&class];
        let styles = gallery
            .ids
            .iter()
            .map(|id| {
                let record = s.manifest.image(id).ok_or_else(|| ServiceError::Internal(format!("missing image `{id}`")))?;
                Ok(json!({ "id": id, "thumbnail": encode_png(&record.pixels)? }))
            })
            .collect::<Result<Vec<_>, ServiceError>>()?;
        Ok(Json(json!({
            "class": s.pipeline.class_names()[class],
            "styles": styles,
            "shortlist": gallery.shortlist.ids,
            "short": gallery.shortlist.short,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct GenerateRequest {
    /// Base64 PNG of the sketch.
    pub sketch: String,
    pub class: ClassRef,
    /// Id of a corpus image to use as the style.
    pub style_id: Option<String>,
    /// Base64 PNG of an uploaded style image.
    pub style: Option<String>,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
    pub top_k: Option<usize>,
    pub session_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub generation_id: String,
    pub session_id: String,
    pub class: String,
    pub image: String,
    pub tokens_digest: String,
    pub seed: u64,
    pub temperature: f64,
    pub top_k: usize,
    pub config_hash: String,
}

fn run_generate(s: &AppState, req: GenerateRequest) -> Result<GenerateResponse, ServiceError> {
    let class = s.class(&req.class)?;
    let (r, _) = s.pipeline.resolution();
    let sketch = decode_png(&req.sketch, 1, "sketch")?;
    let style = match (&req.style_id, &req.style) {
        (Some(id), None) => {
            s.manifest.image(id).ok_or_else(|| ServiceError::BadRequest(format!("unknown style image `{id}`")))?.pixels.clone()
        }
        (None, Some(png)) => decode_png(png, 3, "style")?,
        _ => return Err(ServiceError::BadRequest("give exactly one of `style_id` and `style`".into())),
    };
    for (what, img) in [("sketch", &sketch), ("style", &style)] {
        if (img.height, img.width) != (r, r) {
            return Err(ServiceError::BadRequest(format!("{what} must be {r}x{r}, got {}x{}", img.height, img.width)));
        }
    }
    let sampling = SamplingParams {
        temperature: req.temperature.unwrap_or(s.config.sampling.temperature),
        top_k: req.top_k.unwrap_or(s.config.sampling.top_k),
    };
    if !(sampling.temperature > 0.0 && sampling.temperature.is_finite()) || sampling.top_k == 0 {
        return Err(ServiceError::BadRequest("temperature must be positive and top_k at least 1".into()));
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    let result = s.pipeline.generate(&sketch, &style, class, sampling, seed)?;
    let point = s.pipeline.embed_tokens(class, &[&result.tokens])?.remove(0);
    let (_, query_decode) = s.pipeline.decode_point(class, &point.mean)?;
    let record = GenerationRecord {
        generation_id: String::new(),
        session_id: String::new(),
        class_label: class,
        seed,
        sampling,
        config_hash: result.provenance.config_hash.clone(),
        tokens_digest: tokens_digest(&result.tokens),
        mean: point.mean,
        image_png: result.image.to_png_bytes()?,
        query_decode_png: query_decode.to_png_bytes()?,
    };
    let record = s.write().commit(record, req.session_id)?;
    Ok(GenerateResponse {
        generation_id: record.generation_id,
        session_id: record.session_id,
        class: s.pipeline.class_names()[class].clone(),
        image: STANDARD.encode(&record.image_png),
        tokens_digest: record.tokens_digest,
        seed,
        temperature: sampling.temperature,
        top_k: sampling.top_k,
        config_hash: record.config_hash,
    })
}

async fn generate(State(state): State<SharedState>, Json(req): Json<GenerateRequest>) -> ApiResult<GenerateResponse> {
    blocking(state, move |s| run_generate(s, req).map(Json)).await
}

#[derive(Debug, Deserialize)]
pub struct RetrieveRequest {
    pub generation_id: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    5
}

fn thumbnail(s: &AppState, id: &str, generated: Option<&[u8]>) -> Result<String, ServiceError> {
    match generated {
        Some(png) => Ok(STANDARD.encode(png)),
        None => {
            let record = s.manifest.image(id).ok_or_else(|| ServiceError::Internal(format!("missing image `{id}`")))?;
            encode_png(&record.pixels)
        }
    }
}

fn run_retrieve(s: &AppState, req: RetrieveRequest) -> Result<Value, ServiceError> {
    let store = s.read();
    let query = store
        .generations
        .get(&req.generation_id)
        .ok_or_else(|| ServiceError::NotFound(format!("generation `{}`", req.generation_id)))?;
    let index = store
        .indices
        .get(&query.class_label)
        .ok_or_else(|| ServiceError::Internal(format!("class {} has no index", query.class_label)))?;
    let found = retrieve(&query.mean, index, req.k.saturating_add(1))?;
    let hits: Vec<_> = found.hits.into_iter().filter(|h| h.id != query.generation_id).take(req.k).collect();
    let truncated = hits.len() < req.k;
    let mut results = Vec::with_capacity(hits.len());
    for hit in hits {
        let source = index.get(&hit.id).map(|e| e.source.clone()).unwrap_or(EntrySource::Real);
        let generated = store.generations.get(&hit.id).map(|g| g.image_png.as_slice());
        results.push(json!({
            "id": hit.id,
            "distance": hit.distance,
            "source": source,
            "thumbnail": thumbnail(s, &hit.id, generated)?,
        }));
    }
    Ok(json!({
        "generation_id": query.generation_id,
        "class": s.pipeline.class_names()[query.class_label],
        "results": results,
        "truncated": truncated,
    }))
}

async fn retrieve_neighbors(State(state): State<SharedState>, Json(req): Json<RetrieveRequest>) -> ApiResult<Value> {
    blocking(state, move |s| run_retrieve(s, req).map(Json)).await
}

/// One `t` or a list of them.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum TValues {
    One(f64),
    Many(Vec<f64>),
}

#[derive(Debug, Deserialize)]
pub struct InterpolateRequest {
    pub generation_id: String,
    pub neighbor_id: String,
    /// Explicit path parameters, decoded without the quality filter.
    pub t: Option<TValues>,
    /// Evenly spaced interior samples, kept when they pass the quality filter.
    pub n_samples: Option<usize>,
}

/// Embedding of `neighbor` in `class`, or the status explaining why there is none.
fn neighbor_point(s: &AppState, class: usize, neighbor: &str) -> Result<Vec<f64>, ServiceError> {
    let conflict = |other: usize| {
        ServiceError::Conflict(format!(
            "`{neighbor}` belongs to class `{}`, the query to `{}`",
            s.pipeline.class_names()[other],
            s.pipeline.class_names()[class]
        ))
    };
    let store = s.read();
    if let Some(g) = store.generations.get(neighbor) {
        return if g.class_label == class { Ok(g.mean.clone()) } else { Err(conflict(g.class_label)) };
    }
    if let Some(e) = store.indices.get(&class).and_then(|x| x.get(neighbor)) {
        return Ok(e.mean.clone());
    }
    if let Some((&other, _)) = store.indices.iter().find(|(_, x)| x.get(neighbor).is_some()) {
        return Err(conflict(other));
    }
    drop(store);
    let record = s.manifest.image(neighbor).ok_or_else(|| ServiceError::NotFound(format!("neighbor `{neighbor}`")))?;
    if record.class_label != class {
        return Err(conflict(record.class_label));
    }
    let tokens = s.pipeline.image_vq().tokenize(&[&record.pixels])?;
    Ok(s.pipeline.embed_tokens(class, &[&tokens[0]])?.remove(0).mean)
}

fn run_interpolate(s: &AppState, req: InterpolateRequest) -> Result<Value, ServiceError> {
    let (class, query) = {
        let store = s.read();
        let g = store
            .generations
            .get(&req.generation_id)
            .ok_or_else(|| ServiceError::NotFound(format!("generation `{}`", req.generation_id)))?;
        (g.class_label, g.mean.clone())
    };
    let neighbor = neighbor_point(s, class, &req.neighbor_id)?;
    let outcome = match (req.t, req.n_samples) {
        (Some(t), None) => {
            let ts = match t {
                TValues::One(t) => vec![t],
                TValues::Many(ts) => ts,
            };
            if ts.is_empty() || ts.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(ServiceError::BadRequest("every t must lie in [0, 1]".into()));
            }
            s.pipeline.interpolate_at(class, &query, &neighbor, &ts)?
        }
        (None, Some(n)) if n > 0 => {
            s.pipeline.interpolate(class, &query, &neighbor, n, Some(s.config.quality_multiplier))?
        }
        _ => return Err(ServiceError::BadRequest("give exactly one of `t` and a positive `n_samples`".into())),
    };
    let results = outcome
        .survivors
        .iter()
        .map(|i| {
            Ok(json!({
                "t": i.t,
                "image": encode_png(&i.image)?,
                "tokens_digest": tokens_digest(&i.tokens),
                "distance": i.distance,
                "quality": i.quality,
            }))
        })
        .collect::<Result<Vec<_>, ServiceError>>()?;
    Ok(json!({
        "generation_id": req.generation_id,
        "neighbor_id": req.neighbor_id,
        "class": s.pipeline.class_names()[class],
        "requested": outcome.requested,
        "empty": outcome.empty,
        "results": results,
    }))
}

async fn interpolate(State(state): State<SharedState>, Json(req): Json<InterpolateRequest>) -> ApiResult<Value> {
    blocking(state, move |s| run_interpolate(s, req).map(Json)).await
}

async fn generation(State(state): State<SharedState>, Path(id): Path<String>) -> ApiResult<Value> {
    let store = state.read();
    let g = store.generations.get(&id).ok_or_else(|| ServiceError::NotFound(format!("generation `{id}`")))?;
    let session = store.sessions.get(&g.session_id);
    Ok(Json(json!({
        "generation_id": g.generation_id,
        "session_id": g.session_id,
        "class": state.pipeline.class_names()[g.class_label],
        "seed": g.seed,
        "temperature": g.sampling.temperature,
        "top_k": g.sampling.top_k,
        "config_hash": g.config_hash,
        "tokens_digest": g.tokens_digest,
        "image": STANDARD.encode(&g.image_png),
        "query_decode": STANDARD.encode(&g.query_decode_png),
        "session_history": session.map(|x| x.history.clone()).unwrap_or_default(),
    })))
}

/// Binds `host:port` from the configuration and serves until shutdown.
pub async fn serve(state: AppState) -> anyhow::Result<()> {
    let addr = format!("{}:{}", state.config.server.host, state.config.server.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    log::info!("listening on {addr}, config {}", state.pipeline.config_hash());
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
