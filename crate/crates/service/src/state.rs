//! Shared server state: frozen models plus the guarded index and session store.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use cogs_core::archive::Archive;
use cogs_core::dataset::{Manifest, Split};
use cogs_core::pipeline::{Pipeline, SamplingParams};
use cogs_core::refine::{EmbeddingIndex, EntrySource};
use cogs_core::style::{diverse_subset, DiverseStyles};
use cogs_core::vq::TokenGrid;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::ServiceError;

/// One generation kept for retrieval and interpolation.
#[derive(Clone, Debug, Serialize)]
pub struct GenerationRecord {
    pub generation_id: String,
    pub session_id: String,
    pub class_label: usize,
    pub seed: u64,
    pub sampling: SamplingParams,
    pub config_hash: String,
    pub tokens_digest: String,
    /// Posterior mean in the class embedding space.
    pub mean: Vec<f64>,
    #[serde(skip)]
    pub image_png: Vec<u8>,
    /// PNG of the decode of `mean`, the `t = 0` end of every interpolation.
    #[serde(skip)]
    pub query_decode_png: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionState {
    pub session_id: String,
    /// Generation ids, oldest first.
    pub history: Vec<String>,
    pub active_class: usize,
}

#[derive(Debug, Default)]
pub struct Store {
    pub generations: HashMap<String, GenerationRecord>,
    pub indices: BTreeMap<usize, EmbeddingIndex>,
    pub sessions: HashMap<String, SessionState>,
    next_generation: u64,
    next_session: u64,
}

impl Store {
    /// Records a generation under a fresh id, appends it to its session and
    /// adds it to the class index, all or nothing.
    pub fn commit(&mut self, mut record: GenerationRecord, session: Option<String>) -> Result<GenerationRecord, ServiceError> {
        let index = self
            .indices
            .get_mut(&record.class_label)
            .ok_or_else(|| ServiceError::BadRequest(format!("class {} has no index", record.class_label)))?;
        let id = loop {
            self.next_generation += 1;
            let id = format!("gen-{:06}", self.next_generation);
            if index.get(&id).is_none() && !self.generations.contains_key(&id) {
                break id;
            }
        };
        index.insert(id.clone(), record.mean.clone(), EntrySource::Generated)?;
        let session_id = match session {
            Some(s) => s,
            None => loop {
                self.next_session += 1;
                let s = format!("session-{:06}", self.next_session);
                if !self.sessions.contains_key(&s) {
                    break s;
                }
            },
        };
        let entry = self.sessions.entry(session_id.clone()).or_insert_with(|| SessionState {
            session_id: session_id.clone(),
            history: Vec::new(),
            active_class: record.class_label,
        });
        entry.history.push(id.clone());
        entry.active_class = record.class_label;
        record.generation_id = id.clone();
        record.session_id = session_id;
        self.generations.insert(id, record.clone());
        Ok(record)
    }
}

/// Style gallery of one class with its diverse shortlist.
#[derive(Clone, Debug)]
pub struct StyleGallery {
    pub ids: Vec<String>,
    pub shortlist: DiverseStyles,
}

pub struct AppState {
    pub pipeline: Pipeline,
    pub manifest: Manifest,
    pub config: RunConfig,
    pub galleries: BTreeMap<usize, StyleGallery>,
    store: RwLock<Store>,
}

pub type SharedState = Arc<AppState>;

pub fn tokens_digest(tokens: &TokenGrid) -> String {
    let mut h = Sha256::new();
    for t in &tokens.indices {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn index_path(model_dir: &Path, class: usize) -> std::path::PathBuf {
    model_dir.join(format!("index_{class}.cogs"))
}

impl AppState {
    /// Builds the state from loaded models. Each class with a refinement model
    /// gets an index over its validation images, or the persisted index in
    /// `model_dir` when one exists.
    pub fn new(pipeline: Pipeline, manifest: Manifest, config: RunConfig) -> Result<Self, ServiceError> {
        if manifest.class_names != pipeline.class_names() {
            return Err(ServiceError::Config("manifest classes differ from the checkpoint classes".into()));
        }
        let (r, _) = pipeline.resolution();
        if manifest.resolution != (r, r) {
            return Err(ServiceError::Config(format!(
                "manifest resolution {:?} differs from model resolution {r}",
                manifest.resolution
            )));
        }
        let val = manifest.split(Split::Val);
        let mut indices = BTreeMap::new();
        for &class in pipeline.refiners().keys() {
            let path = index_path(&config.model_dir, class);
            let index = if path.is_file() {
                EmbeddingIndex::from_archive(&Archive::load(&path)?)?
            } else {
                pipeline.build_index(class, &val)?
            };
            indices.insert(class, index);
        }
        let mut galleries = BTreeMap::new();
        for class in 0..pipeline.class_names().len() {
            let records: Vec<_> = manifest.images().filter(|r| r.class_label == class).collect();
            let embeddings = pipeline.style().embed_batch(&records.iter().map(|r| &r.pixels).collect::<Vec<_>>())?;
            let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
            let shortlist = diverse_subset(&ids, &embeddings.iter().collect::<Vec<_>>(), config.style_shortlist, manifest.seed);
            galleries.insert(class, StyleGallery { ids: ids.iter().map(|s| s.to_string()).collect(), shortlist });
        }
        let store = Store { indices, ..Store::default() };
        Ok(Self { pipeline, manifest, config, galleries, store: RwLock::new(store) })
    }

    /// Loads the checkpoints and manifest named by `config`.
    pub fn load(config: RunConfig) -> Result<Self, ServiceError> {
        config.check_files()?;
        let pipeline = Pipeline::load(&config.model_dir)?;
        let manifest = Manifest::load(&config.data_dir)?;
        Self::new(pipeline, manifest, config)
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Store> {
        self.store.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Store> {
        self.store.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Resolves a class given by name or by index.
    pub fn class(&self, class: &ClassRef) -> Result<usize, ServiceError> {
        let n = self.pipeline.class_names().len();
        match class {
            ClassRef::Index(i) if *i < n => Ok(*i),
            ClassRef::Index(i) => Err(ServiceError::BadRequest(format!("unknown class {i}"))),
            ClassRef::Name(s) => self
                .pipeline
                .class_index(s)
                .or_else(|| s.parse::<usize>().ok().filter(|&i| i < n))
                .ok_or_else(|| ServiceError::BadRequest(format!("unknown class `{s}`"))),
        }
    }
}

/// A class named either by its label or by its index.
#[derive(Clone, Debug, PartialEq, serde::Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Index(usize),
    Name(String),
}
