//! Evaluation suites over a trained pipeline and the validation split.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{pair_styles, Manifest, Split, Triple};
use crate::error::{CogsError, Result};
use crate::imaging::EdgeConfig;
use crate::metrics::{
    chamfer_structure, diversity_score, embed_features, frechet_distance, partition_classes, precision_at_k,
    GaussianStats,
};
use crate::pipeline::{GenerationResult, Pipeline, SamplingParams};
use crate::raster::Raster;
use crate::refine::retrieve;
use crate::transformer::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSuite {
    Fid,
    Diversity,
    Style,
    Structure,
    Partition,
    Precision,
}

impl EvalSuite {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fid => "fid",
            Self::Diversity => "diversity",
            Self::Style => "style",
            Self::Structure => "structure",
            Self::Partition => "partition",
            Self::Precision => "precision",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sampling: SamplingParams,
    /// Outputs drawn per input for the diversity suite.
    pub samples_per_input: usize,
    /// Retrieval depth for the precision suite.
    pub k: usize,
    pub edges: EdgeConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sampling: SamplingParams::default(), samples_per_input: 5, k: 5, edges: EdgeConfig::default(), seed: 0 }
    }
}

struct Inputs {
    val: Manifest,
    triples: Vec<Triple>,
    conditions: Vec<TokenSequence>,
}

fn inputs(pipeline: &Pipeline, manifest: &Manifest) -> Result<Inputs> {
    let val = manifest.split(Split::Val);
    let triples = pair_styles(&val, pipeline.style())?.triples;
    if triples.is_empty() {
        return Err(CogsError::InvalidInput("validation split produced no triples".into()));
    }
    let mut conditions = Vec::with_capacity(triples.len());
    for t in &triples {
        let sketch = val.sketch(&t.sketch_id).ok_or_else(|| CogsError::InvalidInput(format!("unknown sketch `{}`", t.sketch_id)))?;
        let style = val
            .image(&t.style_image_id)
            .ok_or_else(|| CogsError::InvalidInput(format!("unknown image `{}`", t.style_image_id)))?;
        conditions.push(pipeline.condition(&Raster::from_mask(&sketch.pixels), &style.pixels, t.class_label)?);
    }
    Ok(Inputs { val, triples, conditions })
}

fn generate(pipeline: &Pipeline, inputs: &Inputs, cfg: &EvalConfig, offset: u64) -> Result<Vec<GenerationResult>> {
    let seeds: Vec<u64> = (0..inputs.conditions.len() as u64).map(|i| cfg.seed.wrapping_add(offset).wrapping_add(i)).collect();
    pipeline.generate_batch(&inputs.conditions, cfg.sampling, &seeds)
}

fn per_class_mean(values: &[(usize, f64)], names: &[String]) -> serde_json::Value {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(c, v) in values {
        let e = sums.entry(c).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let per: BTreeMap<&str, f64> = sums.iter().map(|(&c, &(s, n))| (names[c].as_str(), s / n as f64)).collect();
    let mean = values.iter().map(|v| v.1).sum::<f64>() / values.len().max(1) as f64;
    json!({ "per_class": per, "mean": mean, "count": values.len() })
}

fn class_fids(pipeline: &Pipeline, inputs: &Inputs, cfg: &EvalConfig) -> Result<BTreeMap<usize, f64>> {
    let outputs = generate(pipeline, inputs, cfg, 0)?;
    let mut out = BTreeMap::new();
    for class in 0..pipeline.class_names().len() {
        let real: Vec<&Raster> = inputs.val.images().filter(|r| r.class_label == class).map(|r| &r.pixels).collect();
        let fake: Vec<&Raster> = inputs
            .triples
            .iter()
            .zip(&outputs)
            .filter(|(t, _)| t.class_label == class)
            .map(|(_, g)| &g.image)
            .collect();
        if real.len() < 2 || fake.len() < 2 {
            continue;
        }
        let a = GaussianStats::fit(&embed_features(pipeline.style(), &real)?)?;
        let b = GaussianStats::fit(&embed_features(pipeline.style(), &fake)?)?;
        out.insert(class, frechet_distance(&a, &b)?);
    }
    Ok(out)
}

/// Runs one suite and returns its JSON report.
pub fn evaluate(pipeline: &Pipeline, manifest: &Manifest, suite: EvalSuite, cfg: &EvalConfig) -> Result<serde_json::Value> {
    let names = pipeline.class_names();
    let inputs = inputs(pipeline, manifest)?;
    let body = match suite {
        EvalSuite::Fid => {
            let fids = class_fids(pipeline, &inputs, cfg)?;
            per_class_mean(&fids.into_iter().collect::<Vec<_>>(), names)
        }
        EvalSuite::Partition => {
            let fids = class_fids(pipeline, &inputs, cfg)?;
            let parts = partition_classes(&fids)?;
            let named = |v: &[usize]| v.iter().map(|&c| names[c].clone()).collect::<Vec<_>>();
            json!({
                "simple": named(&parts.simple),
                "medium": named(&parts.medium),
                "complex": named(&parts.complex),
                "fid": fids.iter().map(|(&c, &v)| (names[c].clone(), v)).collect::<BTreeMap<_, _>>(),
            })
        }
        EvalSuite::Diversity => {
            let n = cfg.samples_per_input.max(2);
            let mut runs = Vec::with_capacity(n);
            for r in 0..n {
                runs.push(generate(pipeline, &inputs, cfg, (r * inputs.conditions.len()) as u64)?);
            }
            let mut scores = Vec::with_capacity(inputs.triples.len());
            for (i, t) in inputs.triples.iter().enumerate() {
                let images: Vec<&Raster> = runs.iter().map(|run| &run[i].image).collect();
                scores.push((t.class_label, diversity_score(pipeline.style(), &images)?));
            }
            per_class_mean(&scores, names)
        }
        EvalSuite::Style => {
            let outputs = generate(pipeline, &inputs, cfg, 0)?;
            let generated: Vec<&Raster> = outputs.iter().map(|g| &g.image).collect();
            let styles = inputs
                .triples
                .iter()
                .map(|t| inputs.val.image(&t.style_image_id).map(|r| &r.pixels))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| CogsError::InvalidInput("style image missing".into()))?;
            let a = pipeline.style().embed_batch(&generated)?;
            let b = pipeline.style().embed_batch(&styles)?;
            let d: Vec<(usize, f64)> = inputs
                .triples
                .iter()
                .zip(a.iter().zip(&b))
                .map(|(t, (x, y))| (t.class_label, x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()))
                .collect();
            per_class_mean(&d, names)
        }
        EvalSuite::Structure => {
            let outputs = generate(pipeline, &inputs, cfg, 0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (mut own, mut other, mut wins, mut empty) = (Vec::new(), Vec::new(), 0usize, 0usize);
            for (i, (t, g)) in inputs.triples.iter().zip(&outputs).enumerate() {
                let peers: Vec<usize> = (0..inputs.triples.len())
                    .filter(|&j| j != i && inputs.triples[j].class_label == t.class_label)
                    .collect();
                if peers.is_empty() {
                    continue;
                }
                let j = peers[rng.random_range(0..peers.len())];
                let sketch = |k: usize| inputs.val.sketch(&inputs.triples[k].sketch_id).map(|s| &s.pixels);
                let (Some(a), Some(b)) = (sketch(i), sketch(j)) else { continue };
                let oa = chamfer_structure(a, &g.image, &cfg.edges)?;
                let ob = chamfer_structure(b, &g.image, &cfg.edges)?;
                empty += oa.empty_edges as usize;
                wins += (oa.distance < ob.distance) as usize;
                own.push((t.class_label, oa.distance));
                other.push((t.class_label, ob.distance));
            }
            json!({
                "own_sketch": per_class_mean(&own, names),
                "other_sketch": per_class_mean(&other, names),
                "win_fraction": wins as f64 / own.len().max(1) as f64,
                "empty_edge_outputs": empty,
            })
        }
        EvalSuite::Precision => {
            let outputs = generate(pipeline, &inputs, cfg, 0)?;
            let mut relevance = Vec::new();
            let mut hits = Vec::new();
            for class in 0..names.len() {
                if pipeline.refiners().get(&class).is_none() {
                    continue;
                }
                let index = pipeline.build_index(class, &inputs.val)?;
                if index.len() < cfg.k {
                    continue;
                }
                for (t, g) in inputs.triples.iter().zip(&outputs).filter(|(t, _)| t.class_label == class) {
                    let point = pipeline.embed_tokens(class, &[&g.tokens])?.remove(0);
                    let found = retrieve(&point.mean, &index, cfg.k)?;
                    let rel: Vec<bool> = found.hits.iter().map(|h| h.id == t.target_image_id).collect();
                    hits.push((class, rel.iter().any(|&r| r) as u8 as f64));
                    relevance.push(rel);
                }
            }
            json!({
                "k": cfg.k,
                "precision_at_k": precision_at_k(&relevance, cfg.k)?,
                "target_recall_at_k": per_class_mean(&hits, names),
                "relevance": "a hit is the image the query sketch was extracted from",
            })
        }
    };
    Ok(json!({ "suite": suite.name(), "config_hash": pipeline.config_hash(), "inputs": inputs.triples.len(), "report": body }))
}
