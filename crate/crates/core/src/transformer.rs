//! Conditional autoregressive model over image tokens.
//!
//! The input sequence is `[sketch tokens | style tokens | class | target]`.
//! All segments share one embedding table with disjoint row ranges:
//!
//! ```text
//! [0, K_sk)                      sketch vocabulary
//! [K_sk, K_sk + K_img)           image vocabulary (style and target segments)
//! [K_sk + K_img, ... + C)        class tokens
//! K_sk + K_img + C               null class token
//! ```
//!
//! Segment and position embeddings are added to the token embedding. The
//! conditioning prefix attends to itself in full; target positions attend to
//! the whole prefix and causally to earlier targets.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{bail_config, CogsError, Result};
use crate::nn::attention::masked_softmax;
use crate::nn::layers::{log_softmax_last, softmax_last, Embedding, LayerNorm, Linear};
use crate::nn::{scalar, Adam, Init, ParamBuilder};
use crate::raster::{rasters_to_tensor, Raster};
use crate::style::StyleEncoder;
use crate::vq::{TokenGrid, VqModel};

const SEGMENT_SKETCH: u32 = 0;
const SEGMENT_STYLE: u32 = 1;
const SEGMENT_CLASS: u32 = 2;
const SEGMENT_TARGET: u32 = 3;

/// Desk-scale defaults. The full-scale reference model has 16 layers and 16
/// heads over 16x16 token grids with vocabularies of 1024, giving a
/// conditioning length of 513.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub sketch_vocab: usize,
    pub image_vocab: usize,
    pub n_classes: usize,
    /// Tokens per grid, `h * w`.
    pub grid_tokens: usize,
    pub context_length: usize,
    pub dropout: f64,
    /// Weight of the style term in the training objective.
    pub style_weight: f64,
    /// When false every sequence carries the null class token.
    pub use_class_token: bool,
    pub gumbel_temperature: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            embed_dim: 128,
            sketch_vocab: 128,
            image_vocab: 128,
            n_classes: 6,
            grid_tokens: 64,
            context_length: 200,
            dropout: 0.0,
            style_weight: 1.0,
            use_class_token: true,
            gumbel_temperature: 1.0,
            temperature: 1.0,
            top_k: 32,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 20,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn condition_len(&self) -> usize {
        2 * self.grid_tokens + 1
    }

    /// Model input length during teacher forcing: the condition plus all but the last target.
    pub fn input_len(&self) -> usize {
        self.condition_len() + self.grid_tokens - 1
    }

    pub fn vocab_len(&self) -> usize {
        self.sketch_vocab + self.image_vocab + self.n_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            bail_config!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads);
        }
        if self.sketch_vocab == 0 || self.image_vocab == 0 || self.n_classes == 0 || self.grid_tokens == 0 {
            bail_config!("vocabularies, class count and grid must be non-empty");
        }
        if self.context_length < self.condition_len() + self.grid_tokens {
            bail_config!(
                "context length {} is shorter than condition {} plus target {}",
                self.context_length,
                self.condition_len(),
                self.grid_tokens
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail_config!("dropout must be in [0, 1), got {}", self.dropout);
        }
        if self.style_weight < 0.0 || self.gumbel_temperature <= 0.0 || self.temperature <= 0.0 {
            bail_config!("style weight must be >= 0 and temperatures > 0");
        }
        if self.top_k == 0 || self.top_k > self.image_vocab {
            bail_config!("top_k must be in [1, {}], got {}", self.image_vocab, self.top_k);
        }
        if self.batch_size == 0 {
            bail_config!("batch_size must be positive");
        }
        Ok(())
    }
}

/// Tokenised conditioning: sketch grid, style grid and class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub sketch_tokens: Vec<u32>,
    pub style_tokens: Vec<u32>,
    pub class_token: u32,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.sketch_tokens.len() + self.style_tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Tokenises a sketch with the sketch model and a style image with the image model.
pub fn build_condition(
    sketch_vq: &VqModel,
    image_vq: &VqModel,
    n_classes: usize,
    sketch: &Raster,
    style: &Raster,
    class: usize,
) -> Result<TokenSequence> {
    if class >= n_classes {
        return Err(CogsError::InvalidInput(format!("class {class} out of range for {n_classes} classes")));
    }
    let sk = sketch_vq.tokenize(&[sketch])?.remove(0);
    let st = image_vq.tokenize(&[style])?.remove(0);
    Ok(TokenSequence { sketch_tokens: sk.indices, style_tokens: st.indices, class_token: class as u32 })
}

/// A training example in token form.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleTokens {
    pub condition: TokenSequence,
    pub target: Vec<u32>,
    /// Style embedding of the style image, the target of the style term.
    pub style_embedding: Vec<f32>,
}

/// Tokenises triples against frozen sketch and image models.
pub fn prepare_triples(
    manifest: &crate::dataset::Manifest,
    triples: &[crate::dataset::Triple],
    sketch_vq: &VqModel,
    image_vq: &VqModel,
    style: &StyleEncoder,
) -> Result<Vec<TripleTokens>> {
    let lookup = |id: &str| {
        manifest.image(id).ok_or_else(|| CogsError::InvalidInput(format!("unknown image `{id}`")))
    };
    let mut sketches = Vec::with_capacity(triples.len());
    let mut styles = Vec::with_capacity(triples.len());
    let mut targets = Vec::with_capacity(triples.len());
    for t in triples {
        let sk = manifest
            .sketch(&t.sketch_id)
            .ok_or_else(|| CogsError::InvalidInput(format!("unknown sketch `{}`", t.sketch_id)))?;
        sketches.push(Raster::from_mask(&sk.pixels));
        styles.push(&lookup(&t.style_image_id)?.pixels);
        targets.push(&lookup(&t.target_image_id)?.pixels);
    }
    let sk_refs: Vec<&Raster> = sketches.iter().collect();
    let sk_tokens = sketch_vq.tokenize(&sk_refs)?;
    let st_tokens = image_vq.tokenize(&styles)?;
    let tg_tokens = image_vq.tokenize(&targets)?;
    let embeddings = style.embed_batch(&styles)?;
    Ok(triples
        .iter()
        .enumerate()
        .map(|(i, t)| TripleTokens {
            condition: TokenSequence {
                sketch_tokens: sk_tokens[i].indices.clone(),
                style_tokens: st_tokens[i].indices.clone(),
                class_token: t.class_label as u32,
            },
            target: tg_tokens[i].indices.clone(),
            style_embedding: embeddings[i].iter().map(|&v| v as f32).collect(),
        })
        .collect())
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Gumbel noise and the relaxation captured at a base point. Evaluating the
/// loss with it holds the hard sample and the stop-gradient operand fixed,
/// which is the function whose gradient the straight-through path returns.
#[derive(Clone, Debug)]
pub struct FrozenRelaxation {
    pub noise: Tensor,
    pub hard: Tensor,
    pub soft: Tensor,
}

#[derive(Clone, Debug)]
pub struct TransformerLossTerms {
    pub codebook: Tensor,
    pub style: Tensor,
    pub total: Tensor,
    /// Relaxation used for the style term, absent when its weight is zero.
    pub relaxation: Option<FrozenRelaxation>,
}

/// A teacher-forcing batch.
#[derive(Clone, Debug)]
pub struct TransformerBatch {
    /// `(b, input_len)` embedding-table rows.
    pub inputs: Tensor,
    /// `(b, grid_tokens)` image token ids.
    pub targets: Tensor,
    /// `(b, style_dim)` style embeddings of the style images.
    pub style_embeddings: Tensor,
}

#[derive(Clone, Debug)]
pub struct CogsTransformer {
    cfg: TransformerConfig,
    tokens: Embedding,
    segments: Tensor,
    positions: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    segment_ids: Tensor,
    params: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
}

impl CogsTransformer {
    pub fn new(cfg: TransformerConfig, dtype: DType, trainable: bool) -> Result<Self> {
        let pb = ParamBuilder::random(cfg.seed, dtype, trainable);
        Self::build(cfg, &pb)
    }

    /// Rebuilds a model from named tensors; `trainable` wraps them as variables.
    pub fn from_tensors(
        cfg: TransformerConfig,
        tensors: BTreeMap<String, Tensor>,
        dtype: DType,
        trainable: bool,
    ) -> Result<Self> {
        let pb = ParamBuilder::from_tensors(tensors, dtype, trainable);
        Self::build(cfg, &pb)
    }

    fn build(cfg: TransformerConfig, pb: &ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let tokens = Embedding::new(&pb.pp("tokens"), cfg.vocab_len(), e)?;
        let segments = pb.get("segments", (4, e), Init::Normal { std: 0.02 })?;
        let positions = pb.get("positions", (cfg.context_length, e), Init::Normal { std: 0.02 })?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let b = pb.pp(&format!("block{i}"));
            blocks.push(Block {
                ln1: LayerNorm::new(&b.pp("ln1"), e)?,
                qkv: Linear::new(&b.pp("qkv"), e, 3 * e)?,
                proj: Linear::new(&b.pp("proj"), e, e)?,
                ln2: LayerNorm::new(&b.pp("ln2"), e)?,
                fc1: Linear::new(&b.pp("fc1"), e, 4 * e)?,
                fc2: Linear::new(&b.pp("fc2"), 4 * e, e)?,
            });
        }
        let ln_f = LayerNorm::new(&pb.pp("ln_f"), e)?;
        let head = Linear::zeros(&pb.pp("head"), e, cfg.image_vocab)?;
        let n = cfg.input_len();
        let g = cfg.grid_tokens;
        let c = cfg.condition_len();
        let seg: Vec<u32> = (0..n)
            .map(|i| match i {
                i if i < g => SEGMENT_SKETCH,
                i if i < 2 * g => SEGMENT_STYLE,
                i if i < c => SEGMENT_CLASS,
                _ => SEGMENT_TARGET,
            })
            .collect();
        let segment_ids = Tensor::from_vec(seg, n, &Device::Cpu)?;
        Ok(Self {
            cfg,
            tokens,
            segments,
            positions,
            blocks,
            ln_f,
            head,
            segment_ids,
            params: pb.tensors(),
            vars: pb.vars(),
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.positions.dtype()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Embedding-table rows for a condition, honouring the class-token switch.
    pub fn condition_rows(&self, cond: &TokenSequence) -> Result<Vec<u32>> {
        let cfg = &self.cfg;
        let g = cfg.grid_tokens;
        if cond.sketch_tokens.len() != g || cond.style_tokens.len() != g {
            return Err(CogsError::Shape(format!(
                "condition grids have {} and {} tokens, expected {g}",
                cond.sketch_tokens.len(),
                cond.style_tokens.len()
            )));
        }
        if cond.class_token as usize >= cfg.n_classes {
            return Err(CogsError::InvalidInput(format!("class {} out of range", cond.class_token)));
        }
        let (ks, ki) = (cfg.sketch_vocab as u32, cfg.image_vocab as u32);
        let mut rows = Vec::with_capacity(cfg.condition_len());
        for &t in &cond.sketch_tokens {
            if t >= ks {
                return Err(CogsError::TokenOutOfRange { index: t as usize, size: cfg.sketch_vocab });
            }
            rows.push(t);
        }
        for &t in &cond.style_tokens {
            if t >= ki {
                return Err(CogsError::TokenOutOfRange { index: t as usize, size: cfg.image_vocab });
            }
            rows.push(ks + t);
        }
        let class_row = if cfg.use_class_token { cond.class_token } else { cfg.n_classes as u32 };
        rows.push(ks + ki + class_row);
        Ok(rows)
    }

    fn target_rows(&self, prefix: &[u32]) -> Result<Vec<u32>> {
        let ks = self.cfg.sketch_vocab as u32;
        prefix
            .iter()
            .map(|&t| {
                if (t as usize) < self.cfg.image_vocab {
                    Ok(ks + t)
                } else {
                    Err(CogsError::TokenOutOfRange { index: t as usize, size: self.cfg.image_vocab })
                }
            })
            .collect()
    }

    /// `(b, len)` embedding rows for conditions followed by equal-length target prefixes.
    pub fn input_rows(&self, conds: &[&TokenSequence], prefixes: &[&[u32]]) -> Result<Tensor> {
        let p = prefixes.first().map_or(0, |p| p.len());
        if conds.len() != prefixes.len() || prefixes.iter().any(|x| x.len() != p) {
            return Err(CogsError::Shape("conditions and prefixes must pair up with equal lengths".into()));
        }
        if p >= self.cfg.grid_tokens {
            return Err(CogsError::Shape(format!("prefix length {p} must be below {}", self.cfg.grid_tokens)));
        }
        let mut rows = Vec::with_capacity(conds.len() * (self.cfg.condition_len() + p));
        for (c, pre) in conds.iter().zip(prefixes) {
            rows.extend(self.condition_rows(c)?);
            rows.extend(self.target_rows(pre)?);
        }
        Ok(Tensor::from_vec(rows, (conds.len(), self.cfg.condition_len() + p), &Device::Cpu)?)
    }

    /// Self-attention over `x` whose first row sits at absolute position `start`.
    /// With a cache, keys and values of earlier positions are prepended and the
    /// new ones appended to it.
    fn attention(&self, b: &Block, x: &Tensor, start: usize, cache: Option<&mut (Tensor, Tensor)>) -> Result<Tensor> {
        let (n, t, e) = x.dims3()?;
        let h = self.cfg.heads;
        let d = e / h;
        let qkv = b.qkv.forward(x)?.reshape((n, t, 3, h, d))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let mut k = qkv.get(1)?.contiguous()?;
        let mut v = qkv.get(2)?.contiguous()?;
        if let Some(c) = cache {
            if start > 0 {
                k = Tensor::cat(&[&c.0, &k], 2)?;
                v = Tensor::cat(&[&c.1, &v], 2)?;
            }
            *c = (k.clone(), v.clone());
        }
        let visible = if start == 0 { self.cfg.condition_len() } else { usize::MAX };
        let att = masked_softmax(&q.matmul(&k.t()?.contiguous()?)?, visible, 1.0 / (d as f64).sqrt())?;
        let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, t, e))?;
        b.proj.forward(&y)
    }

    /// Final hidden states for `rows` placed at positions `start..start + len`.
    fn hidden(
        &self,
        rows: &Tensor,
        start: usize,
        mut cache: Option<&mut Vec<(Tensor, Tensor)>>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let (_, t) = rows.dims2()?;
        if start > 0 && t != 1 {
            return Err(CogsError::Shape("incremental steps take one token at a time".into()));
        }
        let seg = self.segments.index_select(&self.segment_ids.narrow(0, start, t)?, 0)?;
        let pos = self.positions.narrow(0, start, t)?;
        let mut x = self.tokens.forward(rows)?.broadcast_add(&(seg + pos)?)?;
        let p = self.cfg.dropout;
        for (i, b) in self.blocks.iter().enumerate() {
            let slot = cache.as_deref_mut().map(|c| &mut c[i]);
            let a = self.attention(b, &b.ln1.forward(&x)?, start, slot)?;
            x = (x + dropout(&a, p, rng.as_deref_mut())?)?;
            let m = b.fc2.forward(&b.fc1.forward(&b.ln2.forward(&x)?)?.relu()?)?;
            x = (x + dropout(&m, p, rng.as_deref_mut())?)?;
        }
        Ok(x)
    }

    /// Logits over the image vocabulary for every target position covered by
    /// `rows`: `(b, len - condition_len + 1, image_vocab)`.
    pub fn logits(&self, rows: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (_, t) = rows.dims2()?;
        let c = self.cfg.condition_len();
        if t < c || t > self.cfg.input_len() {
            return Err(CogsError::Shape(format!("sequence length {t} outside [{c}, {}]", self.cfg.input_len())));
        }
        let x = self.hidden(rows, 0, None, rng)?;
        self.head.forward(&self.ln_f.forward(&x.narrow(1, c - 1, t - c + 1)?)?)
    }

    /// Logits `(prefix_len + 1, image_vocab)` for one condition and target prefix.
    pub fn forward(&self, cond: &TokenSequence, prefix: &[u32]) -> Result<Tensor> {
        let rows = self.input_rows(&[cond], &[prefix])?;
        Ok(self.logits(&rows, None)?.squeeze(0)?)
    }

    /// Soft codebook mixture from relaxed token choices, decoded to `(b, 3, H, W)`.
    fn relaxed_decode(&self, logits: &Tensor, image_vq: &VqModel, frozen: &FrozenRelaxation) -> Result<(Tensor, Tensor)> {
        let (b, g, k) = logits.dims3()?;
        let soft = softmax_last(&((logits + &frozen.noise)? / self.cfg.gumbel_temperature)?)?;
        let y = ((&frozen.hard - &frozen.soft)? + &soft)?;
        let cb = image_vq.codebook_tensor();
        let dim = cb.dim(1)?;
        let side = image_vq.config().grid_size;
        if side * side != g {
            return Err(CogsError::Shape(format!("image grid {side}x{side} does not hold {g} tokens")));
        }
        let z = y.reshape((b * g, k))?.matmul(cb)?.reshape((b, side, side, dim))?.permute((0, 3, 1, 2))?;
        Ok((image_vq.decode_latents(&z.contiguous()?)?, soft))
    }

    /// Draws Gumbel noise for `logits` and captures the resulting relaxation.
    pub fn relax(&self, logits: &Tensor, rng: &mut ChaCha8Rng) -> Result<FrozenRelaxation> {
        let (b, g, k) = logits.dims3()?;
        let noise: Vec<f64> = (0..b * g * k)
            .map(|_| {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                -(-u.ln()).ln()
            })
            .collect();
        let noise = Tensor::from_vec(noise, (b, g, k), &Device::Cpu)?.to_dtype(logits.dtype())?;
        let soft = softmax_last(&((logits.detach() + &noise)? / self.cfg.gumbel_temperature)?)?;
        let hard = one_hot_argmax(&soft)?;
        Ok(FrozenRelaxation { noise, hard, soft })
    }

    /// Codebook term plus the weighted style term on relaxed decodes.
    ///
    /// With `frozen` the relaxation is replayed, otherwise fresh noise is drawn from `rng`.
    pub fn loss(
        &self,
        batch: &TransformerBatch,
        image_vq: &VqModel,
        style: &StyleEncoder,
        frozen: Option<&FrozenRelaxation>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TransformerLossTerms> {
        let drop_rng = if self.cfg.dropout > 0.0 { Some(&mut *rng) } else { None };
        let logits = self.logits(&batch.inputs, drop_rng)?;
        let codebook = codebook_loss(&logits, &batch.targets)?;
        if self.cfg.style_weight == 0.0 {
            let style = codebook.zeros_like()?;
            return Ok(TransformerLossTerms { total: codebook.clone(), codebook, style, relaxation: None });
        }
        let relaxation = match frozen {
            Some(f) => f.clone(),
            None => self.relax(&logits, rng)?,
        };
        let (y_hat, _) = self.relaxed_decode(&logits, image_vq, &relaxation)?;
        let a_hat = style.embed_tensor(&y_hat)?;
        let style_term = (a_hat - batch.style_embeddings.to_dtype(logits.dtype())?)?.sqr()?.sum(D::Minus1)?.mean_all()?;
        let total = (&codebook + (&style_term * self.cfg.style_weight)?)?;
        Ok(TransformerLossTerms { codebook, style: style_term, total, relaxation: Some(relaxation) })
    }

    /// Builds a teacher-forcing batch.
    pub fn batch(&self, items: &[&TripleTokens]) -> Result<TransformerBatch> {
        let conds: Vec<&TokenSequence> = items.iter().map(|t| &t.condition).collect();
        let g = self.cfg.grid_tokens;
        for t in items {
            if t.target.len() != g {
                return Err(CogsError::Shape(format!("target has {} tokens, expected {g}", t.target.len())));
            }
        }
        let prefixes: Vec<&[u32]> = items.iter().map(|t| &t.target[..g - 1]).collect();
        let inputs = self.input_rows(&conds, &prefixes)?;
        let targets: Vec<u32> = items.iter().flat_map(|t| t.target.iter().copied()).collect();
        let targets = Tensor::from_vec(targets, (items.len(), g), &Device::Cpu)?;
        let d = items.first().map_or(0, |t| t.style_embedding.len());
        let emb: Vec<f32> = items.iter().flat_map(|t| t.style_embedding.iter().copied()).collect();
        let style_embeddings = Tensor::from_vec(emb, (items.len(), d), &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok(TransformerBatch { inputs, targets, style_embeddings })
    }

    /// Teacher-forced codebook loss averaged over `items`.
    pub fn evaluate_codebook_loss(&self, items: &[TripleTokens]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in items.chunks(32) {
            let refs: Vec<&TripleTokens> = chunk.iter().collect();
            let b = self.batch(&refs)?;
            total += scalar(&codebook_loss(&self.logits(&b.inputs, None)?, &b.targets)?)? * chunk.len() as f64;
        }
        Ok(total / items.len().max(1) as f64)
    }

    /// Left-to-right sampling of a full token grid for each condition, one RNG per seed.
    pub fn sample_batch(
        &self,
        conds: &[&TokenSequence],
        temperature: f64,
        top_k: usize,
        seeds: &[u64],
    ) -> Result<Vec<Vec<u32>>> {
        if temperature <= 0.0 {
            bail_config!("temperature must be positive, got {temperature}");
        }
        if top_k == 0 || top_k > self.cfg.image_vocab {
            bail_config!("top_k must be in [1, {}], got {top_k}", self.cfg.image_vocab);
        }
        if conds.len() != seeds.len() {
            return Err(CogsError::Shape("one seed per condition is required".into()));
        }
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let c = self.cfg.condition_len();
        let mut out: Vec<Vec<u32>> = Vec::with_capacity(conds.len());
        for (chunk, chunk_rngs) in conds.chunks(64).zip(rngs.chunks_mut(64)) {
            let rows = self.input_rows(chunk, &vec![&[][..]; chunk.len()])?;
            let mut cache = vec![(rows.clone(), rows.clone()); self.blocks.len()];
            let mut h = self.hidden(&rows, 0, Some(&mut cache), None)?.narrow(1, c - 1, 1)?;
            let mut tokens: Vec<Vec<u32>> = vec![Vec::with_capacity(self.cfg.grid_tokens); chunk.len()];
            for step in 0..self.cfg.grid_tokens {
                let logits = self.head.forward(&self.ln_f.forward(&h)?)?.squeeze(1)?;
                let logits: Vec<Vec<f64>> = logits.to_dtype(DType::F64)?.to_vec2()?;
                for ((row, rng), toks) in logits.iter().zip(chunk_rngs.iter_mut()).zip(&mut tokens) {
                    toks.push(pick_token(row, temperature, top_k, rng));
                }
                if step + 1 < self.cfg.grid_tokens {
                    let rows: Vec<u32> = tokens.iter().map(|t| self.cfg.sketch_vocab as u32 + t[step]).collect();
                    let rows = Tensor::from_vec(rows, (chunk.len(), 1), &Device::Cpu)?;
                    h = self.hidden(&rows, c + step, Some(&mut cache), None)?;
                }
            }
            out.extend(tokens);
        }
        Ok(out)
    }

    pub fn sample(&self, cond: &TokenSequence, temperature: f64, top_k: usize, seed: u64) -> Result<TokenGrid> {
        let tokens = self.sample_batch(&[cond], temperature, top_k, &[seed])?.remove(0);
        let side = (self.cfg.grid_tokens as f64).sqrt() as usize;
        TokenGrid::new(side, self.cfg.grid_tokens / side, tokens)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let f32: BTreeMap<String, Tensor> =
            self.params.iter().map(|(k, v)| Ok((k.clone(), v.to_dtype(DType::F32)?))).collect::<Result<_>>()?;
        Ok(Archive::with_tensors(serde_json::json!({"kind": "transformer", "config": self.cfg}), f32))
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.metadata["kind"] != "transformer" {
            return Err(CogsError::Archive("not a transformer checkpoint".into()));
        }
        let cfg: TransformerConfig = serde_json::from_value(archive.metadata["config"].clone())?;
        Self::from_tensors(cfg, archive.tensors.clone(), DType::F32, false)
    }
}

fn dropout(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep: Vec<f64> = (0..x.elem_count())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                .collect();
            let mask = Tensor::from_vec(keep, x.shape(), &Device::Cpu)?.to_dtype(x.dtype())?;
            Ok((x * mask)?)
        }
        _ => Ok(x.clone()),
    }
}

fn one_hot_argmax(x: &Tensor) -> Result<Tensor> {
    let k = x.dim(D::Minus1)?;
    let rows: Vec<f64> = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut hot = vec![0.0f64; rows.len()];
    for (r, chunk) in rows.chunks(k).enumerate() {
        hot[r * k + argmax(chunk)] = 1.0;
    }
    Ok(Tensor::from_vec(hot, x.shape(), &Device::Cpu)?.to_dtype(x.dtype())?)
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Samples from the `top_k` most likely tokens at `temperature`; `top_k == 1` is greedy.
pub fn pick_token(logits: &[f64], temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> u32 {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(top_k.max(1));
    if order.len() == 1 {
        return order[0] as u32;
    }
    let top = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - top) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    *order.last().expect("non-empty") as u32
}

/// Mean negative log-likelihood of `targets` under `(…, K)` logits.
pub fn codebook_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let lp = log_softmax_last(logits)?;
    let idx = targets.unsqueeze(D::Minus1)?.contiguous()?;
    Ok(lp.gather(&idx, D::Minus1)?.neg()?.mean_all()?)
}

/// Squared Euclidean distance between the style embeddings of two `(n, 3, H, W)`
/// batches, averaged over the batch.
pub fn style_loss(enc: &StyleEncoder, y_hat: &Tensor, s: &Tensor) -> Result<Tensor> {
    Ok((enc.embed_tensor(y_hat)? - enc.embed_tensor(s)?)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Style loss between two rasters.
pub fn style_loss_rasters(enc: &StyleEncoder, y_hat: &Raster, s: &Raster) -> Result<f64> {
    let a = rasters_to_tensor(&[y_hat], DType::F64, &Device::Cpu)?;
    let b = rasters_to_tensor(&[s], DType::F64, &Device::Cpu)?;
    scalar(&style_loss(enc, &a, &b)?)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TransformerTrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_codebook: Vec<f64>,
    pub epoch_style: Vec<f64>,
}

/// Teacher-forced training on the combined objective.
pub fn train_transformer(
    data: &[TripleTokens],
    cfg: &TransformerConfig,
    image_vq: &VqModel,
    style: &StyleEncoder,
) -> Result<(CogsTransformer, TransformerTrainReport)> {
    if data.is_empty() {
        bail_config!("no training triples");
    }
    let model = CogsTransformer::new(cfg.clone(), DType::F32, true)?;
    let mut opt = Adam::new(model.vars(), cfg.learning_rate, cfg.clip_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TransformerTrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut cb, mut st, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&TripleTokens> = idx.iter().map(|&i| &data[i]).collect();
            let batch = model.batch(&items)?;
            let terms = model.loss(&batch, image_vq, style, None, &mut rng)?;
            let loss = scalar(&terms.total)?;
            if !loss.is_finite() {
                return Err(CogsError::Diverged { epoch, step, loss });
            }
            opt.backward_step(&terms.total)?;
            let w = items.len() as f64;
            sum += loss * w;
            cb += scalar(&terms.codebook)? * w;
            st += scalar(&terms.style)? * w;
            n += items.len();
        }
        let n = n as f64;
        log::info!("transformer epoch {epoch}: loss {:.4} codebook {:.4} style {:.5}", sum / n, cb / n, st / n);
        report.epoch_loss.push(sum / n);
        report.epoch_codebook.push(cb / n);
        report.epoch_style.push(st / n);
    }
    let frozen = CogsTransformer::from_tensors(cfg.clone(), model.tensors().clone(), DType::F32, false)?;
    Ok((frozen, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::style::StyleConfig;
    use crate::vq::{Domain, VQConfig};

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            heads: 2,
            embed_dim: 8,
            sketch_vocab: 5,
            image_vocab: 6,
            n_classes: 3,
            grid_tokens: 4,
            context_length: 13,
            top_k: 3,
            ..TransformerConfig::default()
        }
    }

    fn cond(seed: u64, cfg: &TransformerConfig) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenSequence {
            sketch_tokens: (0..cfg.grid_tokens).map(|_| rng.random_range(0..cfg.sketch_vocab as u32)).collect(),
            style_tokens: (0..cfg.grid_tokens).map(|_| rng.random_range(0..cfg.image_vocab as u32)).collect(),
            class_token: rng.random_range(0..cfg.n_classes as u32),
        }
    }

    /// Randomises every parameter, including the zero-initialised head.
    fn randomized(cfg: TransformerConfig, dtype: DType) -> CogsTransformer {
        let base = CogsTransformer::new(cfg.clone(), dtype, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tensors = base
            .tensors()
            .iter()
            .map(|(k, v)| {
                let vals: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-0.5..0.5)).collect();
                (k.clone(), Tensor::from_vec(vals, v.shape(), &Device::Cpu).unwrap().to_dtype(dtype).unwrap())
            })
            .collect();
        CogsTransformer::from_tensors(cfg, tensors, dtype, false).unwrap()
    }

    #[test]
    fn default_condition_has_129_tokens() {
        let cfg = TransformerConfig::default();
        assert_eq!(cfg.condition_len(), 64 + 64 + 1);
        cfg.validate().unwrap();
    }

    #[test]
    fn untrained_model_predicts_uniformly() {
        let cfg = tiny_cfg();
        let m = CogsTransformer::new(cfg.clone(), DType::F64, false).unwrap();
        let c = cond(1, &cfg);
        let logits = m.forward(&c, &[1, 2]).unwrap();
        assert_eq!(logits.dims(), &[3, cfg.image_vocab]);
        let targets = Tensor::new(&[[3u32, 0, 5]], &Device::Cpu).unwrap();
        let loss = scalar(&codebook_loss(&logits.unsqueeze(0).unwrap(), &targets).unwrap()).unwrap();
        assert!((loss - (cfg.image_vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn target_perturbation_only_affects_later_positions() {
        let cfg = tiny_cfg();
        let m = randomized(cfg.clone(), DType::F64);
        let c = cond(2, &cfg);
        let base = [1u32, 4, 2];
        let l0: Vec<Vec<f64>> = m.forward(&c, &base).unwrap().to_vec2().unwrap();
        for j in 0..base.len() {
            let mut p = base;
            p[j] = (p[j] + 1) % cfg.image_vocab as u32;
            let l1: Vec<Vec<f64>> = m.forward(&c, &p).unwrap().to_vec2().unwrap();
            for (pos, (a, b)) in l0.iter().zip(&l1).enumerate() {
                if pos <= j {
                    assert_eq!(a, b, "position {pos} moved after perturbing {j}");
                } else {
                    assert_ne!(a, b, "position {pos} ignored token {j}");
                }
            }
        }
    }

    #[test]
    fn nll_matches_hand_computation() {
        let logits = Tensor::new(&[[[1.0f64, 2.0, 0.5], [0.0, -1.0, 3.0]]], &Device::Cpu).unwrap();
        let targets = Tensor::new(&[[1u32, 0]], &Device::Cpu).unwrap();
        let lse1 = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        let lse2 = (1.0 + (-1f64).exp() + 3f64.exp()).ln();
        let expected = ((lse1 - 2.0) + (lse2 - 0.0)) / 2.0;
        let got = scalar(&codebook_loss(&logits, &targets).unwrap()).unwrap();
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let logits = Tensor::new(&[[[0.0f64, 60.0, 0.0]]], &Device::Cpu).unwrap();
        let targets = Tensor::new(&[[1u32]], &Device::Cpu).unwrap();
        assert!(scalar(&codebook_loss(&logits, &targets).unwrap()).unwrap() < 1e-20);
    }

    #[test]
    fn class_range_is_checked() {
        let sk = VqModel::new(Domain::Sketch, tiny_vq(), DType::F32, false).unwrap();
        let im = VqModel::new(Domain::Image, tiny_vq(), DType::F32, false).unwrap();
        let r1 = Raster::filled(4, 4, 1, 0.0);
        let r3 = Raster::filled(4, 4, 3, 0.5);
        assert!(build_condition(&sk, &im, 3, &r1, &r3, 3).is_err());
        let a = build_condition(&sk, &im, 3, &r1, &r3, 2).unwrap();
        assert_eq!(a, build_condition(&sk, &im, 3, &r1, &r3, 2).unwrap());
        let b = build_condition(&sk, &im, 3, &r1, &Raster::filled(4, 4, 3, 0.9), 2).unwrap();
        assert_eq!(a.sketch_tokens, b.sketch_tokens);
        assert_eq!(a.class_token, b.class_token);
    }

    #[test]
    fn greedy_sampling_ignores_seed() {
        let cfg = tiny_cfg();
        let m = randomized(cfg.clone(), DType::F32);
        let c = cond(3, &cfg);
        let a = m.sample(&c, 0.7, 1, 1).unwrap();
        assert_eq!(a, m.sample(&c, 2.0, 1, 2).unwrap());
        let s1 = m.sample(&c, 1.0, 3, 5).unwrap();
        assert_eq!(s1, m.sample(&c, 1.0, 3, 5).unwrap());
    }

    #[test]
    fn cached_greedy_decode_matches_full_forward() {
        let cfg = tiny_cfg();
        let m = randomized(cfg.clone(), DType::F64);
        for seed in 0..4 {
            let c = cond(20 + seed, &cfg);
            let mut prefix: Vec<u32> = Vec::new();
            for _ in 0..cfg.grid_tokens {
                let logits: Vec<Vec<f64>> = m.forward(&c, &prefix).unwrap().to_vec2().unwrap();
                prefix.push(argmax(logits.last().unwrap()) as u32);
            }
            assert_eq!(m.sample(&c, 1.0, 1, 0).unwrap().indices, prefix);
        }
    }

    #[test]
    fn top_k_restricts_support() {
        let logits = [0.0, 5.0, 4.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let t = pick_token(&logits, 10.0, 2, &mut rng);
            assert!(t == 1 || t == 2);
        }
        assert_eq!(pick_token(&[1.0, 1.0], 1.0, 1, &mut rng), 0);
    }

    fn tiny_vq() -> VQConfig {
        VQConfig {
            resolution: 4,
            grid_size: 2,
            code_dim: 3,
            codebook_size: 6,
            hidden_channels: 3,
            ..VQConfig::default()
        }
    }

    fn tiny_style() -> StyleEncoder {
        StyleEncoder::new(StyleConfig { conv_channels: (2, 3), hist_bins: 4, ..StyleConfig::default() }).unwrap()
    }

    fn tiny_batch(m: &CogsTransformer, style: &StyleEncoder) -> TransformerBatch {
        let cfg = m.config();
        let items: Vec<TripleTokens> = (0..2)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(40 + i);
                TripleTokens {
                    condition: cond(10 + i, cfg),
                    target: (0..cfg.grid_tokens).map(|_| rng.random_range(0..cfg.image_vocab as u32)).collect(),
                    style_embedding: (0..style.dim()).map(|_| rng.random_range(0.0..0.3)).collect(),
                }
            })
            .collect();
        let refs: Vec<&TripleTokens> = items.iter().collect();
        m.batch(&refs).unwrap()
    }

    fn trainable(cfg: TransformerConfig) -> CogsTransformer {
        let fixed = randomized(cfg.clone(), DType::F64);
        CogsTransformer::from_tensors(cfg, fixed.tensors().clone(), DType::F64, true).unwrap()
    }

    #[test]
    fn zero_style_weight_reduces_to_codebook_loss() {
        let style = tiny_style();
        let vq = VqModel::new(Domain::Image, tiny_vq(), DType::F64, false).unwrap();
        let m = randomized(TransformerConfig { style_weight: 0.0, ..tiny_cfg() }, DType::F64);
        let b = tiny_batch(&m, &style);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = m.loss(&b, &vq, &style, None, &mut rng).unwrap();
        let cb = scalar(&codebook_loss(&m.logits(&b.inputs, None).unwrap(), &b.targets).unwrap()).unwrap();
        assert_eq!(scalar(&t.total).unwrap(), cb);
    }

    #[test]
    fn loss_is_linear_in_style_weight() {
        let style = tiny_style();
        let vq = VqModel::new(Domain::Image, tiny_vq(), DType::F64, false).unwrap();
        let m1 = randomized(tiny_cfg(), DType::F64);
        let b = tiny_batch(&m1, &style);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t1 = m1.loss(&b, &vq, &style, None, &mut rng).unwrap();
        let m3 = randomized(TransformerConfig { style_weight: 3.0, ..tiny_cfg() }, DType::F64);
        let t3 = m3.loss(&b, &vq, &style, t1.relaxation.as_ref(), &mut rng).unwrap();
        let (c, s) = (scalar(&t1.codebook).unwrap(), scalar(&t1.style).unwrap());
        assert!(s > 0.0);
        assert!((scalar(&t1.total).unwrap() - (c + s)).abs() < 1e-12);
        assert!((scalar(&t3.total).unwrap() - (c + 3.0 * s)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let style = tiny_style();
        let vq = VqModel::new(Domain::Image, tiny_vq(), DType::F64, false).unwrap();
        let m = trainable(tiny_cfg());
        let b = tiny_batch(&m, &style);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frozen = m.loss(&b, &vq, &style, None, &mut rng).unwrap().relaxation.unwrap();
        let report = gradcheck::check(
            m.vars(),
            || Ok(m.loss(&b, &vq, &style, Some(&frozen), &mut ChaCha8Rng::seed_from_u64(0))?.total),
            1e-6,
            12,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-3, "{report:?}");
    }

    #[test]
    fn style_loss_properties_and_gradient() {
        let enc = tiny_style();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut img = || {
            let v: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.random_range(0.05..0.95)).collect();
            Tensor::from_vec(v, (1, 3, 8, 8), &Device::Cpu).unwrap()
        };
        let (a, b) = (img(), img());
        assert_eq!(scalar(&style_loss(&enc, &a, &a).unwrap()).unwrap(), 0.0);
        let ab = scalar(&style_loss(&enc, &a, &b).unwrap()).unwrap();
        assert!(ab > 0.0);
        assert!((ab - scalar(&style_loss(&enc, &b, &a).unwrap()).unwrap()).abs() < 1e-15);
        let x = Var::from_tensor(&a).unwrap();
        let vars = BTreeMap::from([("pixels".to_string(), x.clone())]);
        let report = gradcheck::check(&vars, || style_loss(&enc, x.as_tensor(), &b), 1e-6, 48, 2).unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn archive_roundtrip_preserves_logits() {
        let cfg = tiny_cfg();
        let m = randomized(cfg.clone(), DType::F32);
        let back = CogsTransformer::from_archive(&Archive::from_bytes(&m.to_archive().unwrap().to_bytes().unwrap()).unwrap())
            .unwrap();
        let c = cond(7, &cfg);
        let a: Vec<Vec<f32>> = m.forward(&c, &[0, 1]).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = back.forward(&c, &[0, 1]).unwrap().to_vec2().unwrap();
        assert_eq!(a, b);
    }
}
