//! Per-class variational autoencoder over quantised image latents.
//!
//! The encoder applies one shared transform to every cell of a latent grid,
//! then maps the flattened cells to a diagonal Gaussian in a compact space `W`; the decoder maps a point of `W` back to a continuous
//! grid, which is snapped to the frozen image codebook. Training combines the
//! evidence lower bound with an InfoNCE term whose positives are generations
//! from one sketch under different styles.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{bail_config, CogsError, Result};
use crate::metrics::{frechet_distance, GaussianStats};
use crate::nn::layers::{l2_normalize_rows, log_softmax_last, Linear};
use crate::nn::{scalar, Adam, ParamBuilder};
use crate::raster::Raster;
use crate::vq::{Codebook, LatentGrid, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationPath {
    Linear,
    Spherical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VAEConfig {
    /// Dimension of `W`. The full-scale reference uses 1024.
    pub latent_dim: usize,
    pub hidden: usize,
    /// Width of the transform shared by every grid cell before the dense layers.
    pub cell_channels: usize,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Weight of the contrastive term against the evidence lower bound.
    pub contrastive_weight: f64,
    pub learning_rate: f64,
    /// Sketch groups per batch; each contributes one positive pair.
    pub batch_groups: usize,
    /// Upper bound on contrastive-only epochs.
    pub stage1_max_epochs: usize,
    /// Stage 1 stops once the loss improved by less than `plateau_tolerance`
    /// (relative) over this many epochs.
    pub plateau_patience: usize,
    pub plateau_tolerance: f64,
    /// Initial posterior log standard deviation. Starting well below zero keeps
    /// the reparameterisation noise from swamping the untrained means.
    pub initial_log_sigma: f64,
    pub stage2_epochs: usize,
    pub interpolation: InterpolationPath,
    pub seed: u64,
}

impl Default for VAEConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden: 64,
            cell_channels: 2,
            temperature: 0.1,
            contrastive_weight: 1e6,
            learning_rate: 1e-3,
            batch_groups: 8,
            stage1_max_epochs: 20,
            plateau_patience: 3,
            plateau_tolerance: 1e-3,
            initial_log_sigma: -3.0,
            stage2_epochs: 5,
            interpolation: InterpolationPath::Linear,
            seed: 0,
        }
    }
}

impl VAEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.cell_channels == 0 {
            bail_config!("latent_dim, hidden and cell_channels must be positive");
        }
        if self.temperature <= 0.0 {
            bail_config!("temperature must be positive, got {}", self.temperature);
        }
        if self.contrastive_weight < 0.0 {
            bail_config!("contrastive_weight must be >= 0, got {}", self.contrastive_weight);
        }
        if self.batch_groups < 2 {
            bail_config!("batch_groups must be >= 2 so every batch has at least 4 embeddings");
        }
        if !self.initial_log_sigma.is_finite() {
            bail_config!("initial_log_sigma must be finite");
        }
        if self.plateau_patience == 0 {
            bail_config!("plateau_patience must be positive");
        }
        Ok(())
    }
}

/// Posterior of one latent grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    pub class_label: usize,
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))`, summed over dimensions and averaged over rows.
pub fn kl_divergence(mu: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    let var = (log_sigma * 2.0)?.exp()?;
    let per = ((mu.sqr()? + var)? - 1.0)?.sub(&(log_sigma * 2.0)?)?;
    Ok((per.sum(D::Minus1)? * 0.5)?.mean_all()?)
}

#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub reconstruction: Tensor,
    pub kl: Tensor,
    pub total: Tensor,
}

/// Squared reconstruction error (summed per row, averaged over rows) plus the KL term.
pub fn elbo_loss(x: &Tensor, x_rec: &Tensor, mu: &Tensor, log_sigma: &Tensor) -> Result<ElboTerms> {
    let reconstruction = (x - x_rec)?.sqr()?.sum(D::Minus1)?.mean_all()?;
    let kl = kl_divergence(mu, log_sigma)?;
    let total = (&reconstruction + &kl)?;
    Ok(ElboTerms { reconstruction, kl, total })
}

/// InfoNCE over `2N` embeddings: for anchor `i` with positive `positives[i]`,
/// `-log(exp(u_i . u_p / tau) / sum_{a != i} exp(u_i . u_a / tau))` on
/// L2-normalised rows, averaged over anchors.
pub fn contrastive_loss(w: &Tensor, positives: &[usize], tau: f64) -> Result<Tensor> {
    let (n, _) = w.dims2()?;
    if n < 4 {
        return Err(CogsError::InvalidInput(format!("contrastive batch needs at least 4 embeddings, got {n}")));
    }
    if positives.len() != n {
        return Err(CogsError::InvalidInput(format!("{} positives for {n} anchors", positives.len())));
    }
    for (i, &p) in positives.iter().enumerate() {
        if p >= n || p == i {
            return Err(CogsError::InvalidInput(format!("anchor {i} has no valid positive")));
        }
    }
    if tau <= 0.0 {
        bail_config!("temperature must be positive, got {tau}");
    }
    let u = l2_normalize_rows(w)?;
    let sim = (u.matmul(&u.t()?)? / tau)?;
    let diag: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { -1e30 } else { 0.0 }).collect();
    let diag = Tensor::from_vec(diag, (n, n), &Device::Cpu)?.to_dtype(w.dtype())?;
    let lp = log_softmax_last(&(sim + diag)?)?;
    let idx: Vec<u32> = positives.iter().map(|&p| p as u32).collect();
    let idx = Tensor::from_vec(idx, (n, 1), &Device::Cpu)?;
    Ok(lp.gather(&idx, 1)?.neg()?.mean_all()?)
}

#[derive(Clone, Debug)]
pub struct VaeLossTerms {
    pub elbo: ElboTerms,
    pub contrastive: Tensor,
    pub total: Tensor,
}

/// Evidence lower bound plus the weighted contrastive term.
pub fn vae_loss(elbo: ElboTerms, contrastive: Tensor, weight: f64) -> Result<VaeLossTerms> {
    let total = if weight == 0.0 { elbo.total.clone() } else { (&elbo.total + (&contrastive * weight)?)? };
    Ok(VaeLossTerms { elbo, contrastive, total })
}

#[derive(Clone, Debug)]
pub struct RefineVae {
    cfg: VAEConfig,
    class_label: usize,
    /// `(h, w, dim)` of the latent grids it consumes.
    grid: (usize, usize, usize),
    enc_cell: Linear,
    enc: Linear,
    enc_mu: Linear,
    enc_log_sigma: Linear,
    dec: Linear,
    dec_out: Linear,
    params: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
}

impl RefineVae {
    pub fn new(cfg: VAEConfig, class_label: usize, grid: (usize, usize, usize), dtype: DType, trainable: bool) -> Result<Self> {
        let pb = ParamBuilder::random(cfg.seed, dtype, trainable);
        Self::build(cfg, class_label, grid, &pb)
    }

    pub fn from_tensors(
        cfg: VAEConfig,
        class_label: usize,
        grid: (usize, usize, usize),
        tensors: BTreeMap<String, Tensor>,
        dtype: DType,
        trainable: bool,
    ) -> Result<Self> {
        let pb = ParamBuilder::from_tensors(tensors, dtype, trainable);
        Self::build(cfg, class_label, grid, &pb)
    }

    fn build(cfg: VAEConfig, class_label: usize, grid: (usize, usize, usize), pb: &ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let input = grid.0 * grid.1 * grid.2;
        if input == 0 {
            bail_config!("latent grid must be non-empty");
        }
        let (h, d, c) = (cfg.hidden, cfg.latent_dim, cfg.cell_channels);
        let cells = grid.0 * grid.1;
        Ok(Self {
            enc_cell: Linear::new(&pb.pp("enc_cell"), grid.2, c)?,
            enc: Linear::new(&pb.pp("enc"), cells * c, h)?,
            enc_mu: Linear::new(&pb.pp("enc_mu"), h, d)?,
            enc_log_sigma: Linear::constant(&pb.pp("enc_log_sigma"), h, d, cfg.initial_log_sigma)?,
            dec: Linear::new(&pb.pp("dec"), d, h)?,
            dec_out: Linear::new(&pb.pp("dec_out"), h, input)?,
            params: pb.tensors(),
            vars: pb.vars(),
            cfg,
            class_label,
            grid,
        })
    }

    pub fn config(&self) -> &VAEConfig {
        &self.cfg
    }

    pub fn class_label(&self) -> usize {
        self.class_label
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        self.grid
    }

    pub fn dtype(&self) -> DType {
        self.enc.weight.dtype()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn encoder_vars(&self) -> BTreeMap<String, Var> {
        self.vars.iter().filter(|(k, _)| k.starts_with("enc")).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// `(b, input)` flattened grids to posterior mean and log standard deviation.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = x.dim(0)?;
        let cells = self.grid.0 * self.grid.1;
        let per_cell = self.enc_cell.forward(&x.reshape((b, cells, self.grid.2))?)?.relu()?;
        let h = self.enc.forward(&per_cell.reshape((b, cells * self.cfg.cell_channels))?)?.relu()?;
        Ok((self.enc_mu.forward(&h)?, self.enc_log_sigma.forward(&h)?))
    }

    /// `(b, d)` points to `(b, input)` continuous grids.
    pub fn decode_tensor(&self, w: &Tensor) -> Result<Tensor> {
        self.dec_out.forward(&self.dec.forward(w)?.relu()?)
    }

    /// Flattens grids into a `(b, input)` tensor, checking their shape.
    pub fn grids_tensor(&self, grids: &[&LatentGrid]) -> Result<Tensor> {
        let (h, w, d) = self.grid;
        let mut vals = Vec::with_capacity(grids.len() * h * w * d);
        for g in grids {
            if (g.height, g.width, g.dim) != self.grid {
                return Err(CogsError::Shape(format!(
                    "latent grid {}x{}x{} vs expected {h}x{w}x{d}",
                    g.height, g.width, g.dim
                )));
            }
            vals.extend_from_slice(&g.values);
        }
        Ok(Tensor::from_vec(vals, (grids.len(), h * w * d), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    pub fn encode_batch(&self, grids: &[&LatentGrid]) -> Result<Vec<LatentPoint>> {
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(128) {
            let (mu, ls) = self.encode_tensor(&self.grids_tensor(chunk)?)?;
            let mu: Vec<Vec<f64>> = mu.to_dtype(DType::F64)?.to_vec2()?;
            let ls: Vec<Vec<f64>> = ls.to_dtype(DType::F64)?.to_vec2()?;
            for (m, l) in mu.into_iter().zip(ls) {
                out.push(LatentPoint {
                    mean: m,
                    stddev: l.into_iter().map(f64::exp).collect(),
                    class_label: self.class_label,
                });
            }
        }
        Ok(out)
    }

    pub fn encode(&self, grid: &LatentGrid) -> Result<LatentPoint> {
        Ok(self.encode_batch(&[grid])?.remove(0))
    }

    /// Decodes points of `W` to continuous grids and their nearest-codebook tokens.
    pub fn decode_batch(&self, points: &[&[f64]], codebook: &Codebook) -> Result<Vec<(LatentGrid, TokenGrid)>> {
        let d = self.cfg.latent_dim;
        let (h, w, dim) = self.grid;
        if codebook.dim != dim {
            return Err(CogsError::DimensionMismatch { expected: dim, actual: codebook.dim });
        }
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(128) {
            let mut vals = Vec::with_capacity(chunk.len() * d);
            for p in chunk {
                if p.len() != d {
                    return Err(CogsError::DimensionMismatch { expected: d, actual: p.len() });
                }
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(CogsError::InvalidInput("non-finite latent point".into()));
                }
                vals.extend_from_slice(p);
            }
            let t = Tensor::from_vec(vals, (chunk.len(), d), &Device::Cpu)?.to_dtype(self.dtype())?;
            let rows: Vec<Vec<f32>> = self.decode_tensor(&t)?.to_dtype(DType::F32)?.to_vec2()?;
            for values in rows {
                let indices = values.chunks(dim).map(|c| codebook.nearest(c)).collect();
                out.push((LatentGrid { height: h, width: w, dim, values }, TokenGrid { height: h, width: w, indices }));
            }
        }
        Ok(out)
    }

    pub fn decode(&self, point: &[f64], codebook: &Codebook) -> Result<(LatentGrid, TokenGrid)> {
        Ok(self.decode_batch(&[point], codebook)?.remove(0))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let f32: BTreeMap<String, Tensor> =
            self.params.iter().map(|(k, v)| Ok((k.clone(), v.to_dtype(DType::F32)?))).collect::<Result<_>>()?;
        Ok(Archive::with_tensors(
            serde_json::json!({"kind": "refine_vae", "config": self.cfg, "class_label": self.class_label, "grid": self.grid}),
            f32,
        ))
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = &archive.metadata;
        if meta["kind"] != "refine_vae" {
            return Err(CogsError::Archive("not a refinement VAE checkpoint".into()));
        }
        let cfg: VAEConfig = serde_json::from_value(meta["config"].clone())?;
        let class_label: usize = serde_json::from_value(meta["class_label"].clone())?;
        let grid: (usize, usize, usize) = serde_json::from_value(meta["grid"].clone())?;
        Self::from_tensors(cfg, class_label, grid, archive.tensors.clone(), DType::F32, false)
    }
}

/// Reparameterised sample `mu + sigma * eps` with caller-supplied noise.
pub fn reparameterize(mu: &Tensor, log_sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok((mu + (log_sigma.exp()? * eps)?)?)
}

/// Standard normal noise of the given shape from a seeded stream.
pub fn gaussian_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Generations of one class, grouped by source sketch. Members of a group
/// share the sketch and differ in style, so any two are a positive pair.
#[derive(Clone, Debug, Default)]
pub struct RefineCorpus {
    pub groups: Vec<Vec<LatentGrid>>,
}

impl RefineCorpus {
    fn usable(&self) -> Vec<usize> {
        (0..self.groups.len()).filter(|&g| self.groups[g].len() >= 2).collect()
    }
}

/// One epoch of batches of `2N` grids: rows `i` and `i + N` come from the same
/// group. Every group is visited once per round, and there are as many rounds
/// as the largest group has unordered pairs.
fn batches(corpus: &RefineCorpus, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let mut groups = corpus.usable();
    let largest = groups.iter().map(|&g| corpus.groups[g].len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for _ in 0..largest * largest.saturating_sub(1) / 2 {
        groups.shuffle(rng);
        out.extend(round(corpus, &groups, n, rng));
    }
    out
}

fn round(corpus: &RefineCorpus, groups: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for chunk in groups.chunks(n) {
        if chunk.len() < 2 {
            continue;
        }
        let mut first = Vec::with_capacity(chunk.len());
        let mut second = Vec::with_capacity(chunk.len());
        for &g in chunk {
            let size = corpus.groups[g].len();
            let a = rng.random_range(0..size);
            let b = (a + rng.random_range(1..size)) % size;
            first.push((g, a));
            second.push((g, b));
        }
        first.extend(second);
        out.push(first);
    }
    out
}

/// Positive index for each row of a batch laid out as `[first members | second members]`.
pub fn paired_positives(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RefineTrainReport {
    pub stage1_loss: Vec<f64>,
    pub stage2_loss: Vec<f64>,
    pub stage2_reconstruction: Vec<f64>,
}

/// Two-stage training: contrastive-only on the encoder until the loss
/// plateaus, then the full objective on encoder and decoder.
pub fn train_refine_vae(
    class_label: usize,
    corpus: &RefineCorpus,
    grid: (usize, usize, usize),
    cfg: &VAEConfig,
) -> Result<(RefineVae, RefineTrainReport)> {
    if corpus.usable().len() < 2 {
        bail_config!("class {class_label} needs at least two sketch groups with two generations each");
    }
    let model = RefineVae::new(cfg.clone(), class_label, grid, DType::F32, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = RefineTrainReport::default();
    let d = cfg.latent_dim;

    let mut opt = Adam::new(&model.encoder_vars(), cfg.learning_rate, Some(5.0))?;
    for epoch in 0..cfg.stage1_max_epochs {
        let (mut sum, mut n) = (0.0, 0usize);
        for (step, batch) in batches(corpus, cfg.batch_groups, &mut rng).into_iter().enumerate() {
            let grids: Vec<&LatentGrid> = batch.iter().map(|&(g, m)| &corpus.groups[g][m]).collect();
            let (mu, ls) = model.encode_tensor(&model.grids_tensor(&grids)?)?;
            let eps = gaussian_noise(&mut rng, grids.len(), d, model.dtype())?;
            let w = reparameterize(&mu, &ls, &eps)?;
            let loss = contrastive_loss(&w, &paired_positives(grids.len() / 2), cfg.temperature)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(CogsError::Diverged { epoch, step, loss: v });
            }
            opt.backward_step(&loss)?;
            sum += v;
            n += 1;
        }
        report.stage1_loss.push(sum / n as f64);
        log::info!("refine class {class_label} stage 1 epoch {epoch}: {:.4}", sum / n as f64);
        if plateaued(&report.stage1_loss, cfg.plateau_patience, cfg.plateau_tolerance) {
            break;
        }
    }

    let mut opt = Adam::new(model.vars(), cfg.learning_rate, Some(5.0))?;
    for epoch in 0..cfg.stage2_epochs {
        let (mut sum, mut rec, mut n) = (0.0, 0.0, 0usize);
        for (step, batch) in batches(corpus, cfg.batch_groups, &mut rng).into_iter().enumerate() {
            let grids: Vec<&LatentGrid> = batch.iter().map(|&(g, m)| &corpus.groups[g][m]).collect();
            let x = model.grids_tensor(&grids)?;
            let (mu, ls) = model.encode_tensor(&x)?;
            let eps = gaussian_noise(&mut rng, grids.len(), d, model.dtype())?;
            let w = reparameterize(&mu, &ls, &eps)?;
            let elbo = elbo_loss(&x, &model.decode_tensor(&w)?, &mu, &ls)?;
            let contrastive = contrastive_loss(&w, &paired_positives(grids.len() / 2), cfg.temperature)?;
            let terms = vae_loss(elbo, contrastive, cfg.contrastive_weight)?;
            let v = scalar(&terms.total)?;
            if !v.is_finite() {
                return Err(CogsError::Diverged { epoch: cfg.stage1_max_epochs + epoch, step, loss: v });
            }
            opt.backward_step(&terms.total)?;
            sum += v;
            rec += scalar(&terms.elbo.reconstruction)?;
            n += 1;
        }
        report.stage2_loss.push(sum / n as f64);
        report.stage2_reconstruction.push(rec / n as f64);
        log::info!("refine class {class_label} stage 2 epoch {epoch}: {:.4} (reconstruction {:.4})", sum / n as f64, rec / n as f64);
    }
    let frozen = RefineVae::from_tensors(cfg.clone(), class_label, grid, model.tensors().clone(), DType::F32, false)?;
    Ok((frozen, report))
}

/// True once the best loss of the last `patience` epochs improves on the best
/// before them by less than `tolerance` (relative).
pub fn plateaued(losses: &[f64], patience: usize, tolerance: f64) -> bool {
    if losses.len() <= patience {
        return false;
    }
    let (before, recent) = losses.split_at(losses.len() - patience);
    let best_before = before.iter().copied().fold(f64::INFINITY, f64::min);
    let best_recent = recent.iter().copied().fold(f64::INFINITY, f64::min);
    (best_before - best_recent) / best_before.abs().max(1e-12) < tolerance
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Where an index entry came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntrySource {
    Real,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub mean: Vec<f64>,
    pub source: EntrySource,
}

/// Posterior means of one class, keyed by image or generation id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub class_label: usize,
    pub dim: usize,
    pub entries: BTreeMap<String, IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub id: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub hits: Vec<RetrievalHit>,
    /// Set when fewer than `k` entries were available.
    pub truncated: bool,
}

impl EmbeddingIndex {
    pub fn new(class_label: usize, dim: usize) -> Self {
        Self { class_label, dim, entries: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, mean: Vec<f64>, source: EntrySource) -> Result<()> {
        if mean.len() != self.dim {
            return Err(CogsError::DimensionMismatch { expected: self.dim, actual: mean.len() });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(CogsError::InvalidInput("non-finite index vector".into()));
        }
        self.entries.insert(id.into(), IndexEntry { mean, source });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.get(id)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let ids: Vec<&String> = self.entries.keys().collect();
        let sources: Vec<&EntrySource> = self.entries.values().map(|e| &e.source).collect();
        let flat: Vec<f64> = self.entries.values().flat_map(|e| e.mean.iter().copied()).collect();
        let mut archive = Archive::new(serde_json::json!({
            "kind": "embedding_index",
            "class_label": self.class_label,
            "dim": self.dim,
            "ids": ids,
            "sources": sources,
        }));
        archive.tensors.insert("means".into(), Tensor::from_vec(flat, (ids.len(), self.dim), &Device::Cpu)?);
        Ok(archive)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = &archive.metadata;
        if meta["kind"] != "embedding_index" {
            return Err(CogsError::Archive("not an embedding index".into()));
        }
        let class_label: usize = serde_json::from_value(meta["class_label"].clone())?;
        let dim: usize = serde_json::from_value(meta["dim"].clone())?;
        let ids: Vec<String> = serde_json::from_value(meta["ids"].clone())?;
        let sources: Vec<EntrySource> = serde_json::from_value(meta["sources"].clone())?;
        let means = archive.tensors.get("means").ok_or_else(|| CogsError::Archive("missing `means`".into()))?;
        let (n, d) = means.dims2()?;
        if n != ids.len() || d != dim || sources.len() != n {
            return Err(CogsError::Archive(format!("index header lists {} ids of dim {dim}, payload is {n}x{d}", ids.len())));
        }
        let rows: Vec<Vec<f64>> = means.to_dtype(DType::F64)?.to_vec2()?;
        let mut index = Self::new(class_label, dim);
        for ((id, mean), source) in ids.into_iter().zip(rows).zip(sources) {
            index.insert(id, mean, source)?;
        }
        Ok(index)
    }
}

/// Exact k nearest entries by Euclidean distance; ties go to the smaller id.
pub fn retrieve(query: &[f64], index: &EmbeddingIndex, k: usize) -> Result<RetrievalOutcome> {
    if query.len() != index.dim {
        return Err(CogsError::DimensionMismatch { expected: index.dim, actual: query.len() });
    }
    let mut all: Vec<(f64, &String)> = index.entries.iter().map(|(id, e)| (sq_dist(query, &e.mean), id)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let truncated = k > all.len();
    let hits = all
        .into_iter()
        .take(k)
        .map(|(d, id)| RetrievalHit { id: id.clone(), distance: d.sqrt() })
        .collect();
    Ok(RetrievalOutcome { hits, truncated })
}

/// Point at parameter `t` on the path from `a` to `b`.
pub fn interpolate(a: &[f64], b: &[f64], t: f64, path: InterpolationPath) -> Vec<f64> {
    let lerp = |t: f64| a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect::<Vec<f64>>();
    if t == 0.0 {
        return a.to_vec();
    }
    if t == 1.0 {
        return b.to_vec();
    }
    match path {
        InterpolationPath::Linear => lerp(t),
        InterpolationPath::Spherical => {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return lerp(t);
            }
            let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
            let omega = cos.acos();
            if omega.sin().abs() < 1e-9 {
                return lerp(t);
            }
            let (sa, sb) = (((1.0 - t) * omega).sin() / omega.sin(), (t * omega).sin() / omega.sin());
            a.iter().zip(b).map(|(x, y)| sa * x + sb * y).collect()
        }
    }
}

/// Interior parameters `i / (n + 1)` for `i = 1..=n`.
pub fn interior_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

/// Feature statistics of a class's real images and a calibrated acceptance threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReference {
    pub stats: GaussianStats,
    /// Largest score among the real images the statistics were fitted on.
    pub real_max: f64,
}

impl QualityReference {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let stats = GaussianStats::fit(features)?;
        let mut real_max: f64 = 0.0;
        for f in features {
            real_max = real_max.max(point_frechet(f, &stats)?);
        }
        Ok(Self { stats, real_max })
    }

    pub fn score(&self, feature: &[f64]) -> Result<f64> {
        point_frechet(feature, &self.stats)
    }
}

/// Fréchet distance from a point mass at `x` to the Gaussian `stats`.
pub fn point_frechet(x: &[f64], stats: &GaussianStats) -> Result<f64> {
    let m = stats.dim();
    let point = GaussianStats { mean: x.to_vec(), covariance: vec![0.0; m * m], count: 1 };
    frechet_distance(&point, stats)
}

/// One decoded point on an interpolation path.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolant {
    pub t: f64,
    pub point: Vec<f64>,
    /// Distance in `W` from the query point.
    pub distance: f64,
    pub tokens: TokenGrid,
    pub image: Raster,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationOutcome {
    pub survivors: Vec<Interpolant>,
    pub requested: usize,
    /// Set when no sample passed the quality filter.
    pub empty: bool,
}

/// Decodes points at each `t` along the path; `render` turns token grids into
/// rasters and `features` maps rasters to quality features.
pub fn interpolate_at<R, F>(
    vae: &RefineVae,
    codebook: &Codebook,
    from: &[f64],
    to: &[f64],
    ts: &[f64],
    render: R,
    features: F,
    quality: Option<(&QualityReference, f64)>,
) -> Result<InterpolationOutcome>
where
    R: Fn(&[&TokenGrid]) -> Result<Vec<Raster>>,
    F: Fn(&[&Raster]) -> Result<Vec<Vec<f64>>>,
{
    if from.len() != to.len() {
        return Err(CogsError::DimensionMismatch { expected: from.len(), actual: to.len() });
    }
    if let Some(bad) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CogsError::InvalidInput(format!("interpolation parameter {bad} outside [0, 1]")));
    }
    let path = vae.config().interpolation;
    let points: Vec<Vec<f64>> = ts.iter().map(|&t| interpolate(from, to, t, path)).collect();
    let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
    let decoded = vae.decode_batch(&refs, codebook)?;
    let grids: Vec<&TokenGrid> = decoded.iter().map(|(_, t)| t).collect();
    let images = render(&grids)?;
    let image_refs: Vec<&Raster> = images.iter().collect();
    let feats = features(&image_refs)?;
    let mut survivors = Vec::new();
    for (((t, point), (_, tokens)), (image, feat)) in ts.iter().zip(points).zip(decoded).zip(images.into_iter().zip(feats)) {
        let q = match quality {
            Some((reference, _)) => reference.score(&feat)?,
            None => 0.0,
        };
        if let Some((_, threshold)) = quality {
            if q > threshold {
                continue;
            }
        }
        let distance = sq_dist(&point, from).sqrt();
        survivors.push(Interpolant { t: *t, point, distance, tokens, image, quality: q });
    }
    let empty = survivors.is_empty();
    Ok(InterpolationOutcome { survivors, requested: ts.len(), empty })
}

/// Interior samples between two points, filtered by quality.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_refine<R, F>(
    vae: &RefineVae,
    codebook: &Codebook,
    query: &[f64],
    neighbor: &[f64],
    n_samples: usize,
    render: R,
    features: F,
    quality: Option<(&QualityReference, f64)>,
) -> Result<InterpolationOutcome>
where
    R: Fn(&[&TokenGrid]) -> Result<Vec<Raster>>,
    F: Fn(&[&Raster]) -> Result<Vec<Vec<f64>>>,
{
    if n_samples == 0 {
        return Err(CogsError::InvalidInput("n_samples must be at least 1".into()));
    }
    interpolate_at(vae, codebook, query, neighbor, &interior_grid(n_samples), render, features, quality)
}

/// Precision@1 of positives over in-batch negatives, using Euclidean distance between posterior means.
///
/// Each group contributes its first two members; every member is an anchor
/// whose positive is the other member of its group.
pub fn positive_ranking_precision(vae: &RefineVae, groups: &[Vec<LatentGrid>]) -> Result<f64> {
    let pairs: Vec<&Vec<LatentGrid>> = groups.iter().filter(|g| g.len() >= 2).collect();
    if pairs.len() < 2 {
        return Err(CogsError::InvalidInput("need at least two groups with two members".into()));
    }
    let n = pairs.len();
    let grids: Vec<&LatentGrid> = pairs.iter().map(|g| &g[0]).chain(pairs.iter().map(|g| &g[1])).collect();
    let means: Vec<Vec<f64>> = vae.encode_batch(&grids)?.into_iter().map(|p| p.mean).collect();
    let positives = paired_positives(n);
    let mut hits = 0usize;
    for i in 0..2 * n {
        let p = positives[i];
        let dp = sq_dist(&means[i], &means[p]);
        let beaten = (0..2 * n).any(|j| j != i && j != p && sq_dist(&means[i], &means[j]) <= dp);
        if !beaten {
            hits += 1;
        }
    }
    Ok(hits as f64 / (2 * n) as f64)
}
