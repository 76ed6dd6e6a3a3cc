//! Discrete-codebook autoencoder: convolutional encoder, nearest-entry
//! quantisation with a straight-through estimator, and a convolutional decoder.
//!
//! One instance models sketches (1 channel), another images (3 channels).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::dataset::{Manifest, Split};
use crate::error::{bail_config, CogsError, Result};
use crate::nn::layers::Conv2d;
use crate::nn::{scalar, Adam, Init, ParamBuilder};
use crate::raster::{rasters_to_tensor, tensor_to_rasters, Raster};
use crate::style::StyleEncoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sketch,
    Image,
}

impl Domain {
    pub fn channels(self) -> usize {
        match self {
            Domain::Sketch => 1,
            Domain::Image => 3,
        }
    }
}

/// Desk-scale defaults: an 8x8 grid of 64-dimensional codes from a
/// 128-entry codebook. (Full scale would be 16x16, 256, 1024.)
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VQConfig {
    pub resolution: usize,
    /// Token grid side; the grid is `grid_size x grid_size`.
    pub grid_size: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub hidden_channels: usize,
    pub commitment_beta: f64,
    pub perceptual_weight: f64,
    /// Sketch domain only: relative weight of stroke pixels in the L1 term.
    /// Strokes cover a few percent of a sketch, and without reweighting the
    /// blank prediction is the L1 optimum.
    pub stroke_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: Option<f64>,
    pub reinit_dead_codes: bool,
    pub seed: u64,
}

impl Default for VQConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            grid_size: 8,
            code_dim: 64,
            codebook_size: 128,
            hidden_channels: 32,
            commitment_beta: 0.25,
            perceptual_weight: 0.1,
            stroke_weight: 8.0,
            learning_rate: 2e-3,
            batch_size: 16,
            epochs: 12,
            clip_norm: Some(5.0),
            reinit_dead_codes: true,
            seed: 0,
        }
    }
}

impl VQConfig {
    /// Number of stride-2 stages between the raster and the token grid.
    pub fn downsample_steps(&self) -> Result<usize> {
        if self.grid_size == 0 || self.resolution % self.grid_size != 0 {
            bail_config!("resolution {} is not a multiple of grid size {}", self.resolution, self.grid_size);
        }
        let factor = self.resolution / self.grid_size;
        if !factor.is_power_of_two() {
            bail_config!("downsampling factor {factor} is not a power of two");
        }
        Ok(factor.trailing_zeros() as usize)
    }

    pub fn tokens(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn validate(&self) -> Result<()> {
        self.downsample_steps()?;
        if self.codebook_size == 0 || self.code_dim == 0 || self.hidden_channels == 0 {
            bail_config!("codebook size, code dimension and hidden channels must be positive");
        }
        if self.commitment_beta < 0.0 || self.perceptual_weight < 0.0 || self.stroke_weight <= 0.0 {
            bail_config!("loss weights must be non-negative");
        }
        if self.batch_size == 0 {
            bail_config!("batch size must be positive");
        }
        Ok(())
    }
}

/// Continuous encoder output, `h x w x dim`, row-major with the code vector innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl LatentGrid {
    pub fn cell(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `(n, dim, h, w)` tensor of a batch of grids.
    pub fn to_tensor(grids: &[&LatentGrid], dtype: DType) -> Result<Tensor> {
        let first = grids.first().ok_or_else(|| CogsError::InvalidInput("no grids".into()))?;
        let (h, w, d) = (first.height, first.width, first.dim);
        let mut data = Vec::with_capacity(grids.len() * h * w * d);
        for g in grids {
            if (g.height, g.width, g.dim) != (h, w, d) {
                return Err(CogsError::Shape("latent grids differ in shape".into()));
            }
            data.extend_from_slice(&g.values);
        }
        let t = Tensor::from_vec(data, (grids.len(), h, w, d), &Device::Cpu)?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
    }

    /// Splits an `(n, dim, h, w)` tensor into grids.
    pub fn from_tensor(t: &Tensor) -> Result<Vec<LatentGrid>> {
        let (n, d, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.permute((0, 2, 3, 1))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Ok(flat
            .chunks(h * w * d)
            .take(n)
            .map(|c| LatentGrid { height: h, width: w, dim: d, values: c.to_vec() })
            .collect())
    }
}

/// Index form of a quantised latent.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(CogsError::DimensionMismatch { expected: height * width, actual: indices.len() });
        }
        Ok(Self { height, width, indices })
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= size) {
            Some(&bad) => Err(CogsError::TokenOutOfRange { index: bad as usize, size }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    /// Row-major `size x dim`.
    pub entries: Vec<f32>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, entries: Vec<f32>) -> Result<Self> {
        if entries.len() != size * dim {
            return Err(CogsError::DimensionMismatch { expected: size * dim, actual: entries.len() });
        }
        Ok(Self { size, dim, entries })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (size, dim) = t.dims2()?;
        Self::new(size, dim, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the closest row in squared Euclidean distance; the lowest index wins ties.
    pub fn nearest(&self, v: &[f32]) -> u32 {
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size {
            let d: f64 = self.row(k).iter().zip(v).map(|(&c, &x)| (x as f64 - c as f64).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = k as u32;
            }
        }
        best
    }

    /// Smallest distance between two distinct rows.
    pub fn min_row_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.size {
            for b in a + 1..self.size {
                let d: f64 =
                    self.row(a).iter().zip(self.row(b)).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }
}

/// Maps every cell to its nearest codebook row, returning the indices and the selected rows.
pub fn quantize(z: &LatentGrid, cb: &Codebook) -> Result<(TokenGrid, LatentGrid)> {
    if cb.size == 0 {
        return Err(CogsError::InvalidInput("empty codebook".into()));
    }
    if z.dim != cb.dim {
        return Err(CogsError::DimensionMismatch { expected: cb.dim, actual: z.dim });
    }
    let n = z.height * z.width;
    let mut indices = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(z.values.len());
    for i in 0..n {
        let k = cb.nearest(z.cell(i));
        indices.push(k);
        values.extend_from_slice(cb.row(k as usize));
    }
    Ok((
        TokenGrid { height: z.height, width: z.width, indices },
        LatentGrid { height: z.height, width: z.width, dim: z.dim, values },
    ))
}

/// Token usage counts over a set of grids.
pub fn codebook_usage(tokens: &[TokenGrid], size: usize) -> Vec<usize> {
    let mut hist = vec![0usize; size];
    for g in tokens {
        for &i in &g.indices {
            if let Some(slot) = hist.get_mut(i as usize) {
                *slot += 1;
            }
        }
    }
    hist
}

/// Shannon entropy (nats) of a usage histogram.
pub fn usage_entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[derive(Clone, Debug)]
struct Encoder {
    /// Stride-2 stages; the first maps raster channels to hidden channels.
    down: Vec<Conv2d>,
    mid: Conv2d,
    head: Conv2d,
}

#[derive(Clone, Debug)]
struct Decoder {
    stem: Conv2d,
    mid: Conv2d,
    /// Upsample-then-convolve stages; the last one emits raster channels.
    up: Vec<Conv2d>,
}

/// Quantisation state captured at a base point. Evaluating the loss with it
/// treats every stop-gradient operand and the token assignment as constants,
/// which is the function whose gradient the straight-through path returns.
#[derive(Clone, Debug)]
pub struct FrozenQuantization {
    pub indices: Tensor,
    pub z_e: Tensor,
    pub z_q: Tensor,
}

#[derive(Clone, Debug)]
pub struct VqLossTerms {
    pub reconstruction: Tensor,
    pub codebook: Tensor,
    pub commitment: Tensor,
    pub perceptual: Tensor,
    pub total: Tensor,
}

#[derive(Clone, Debug)]
pub struct VqForward {
    pub x_hat: Tensor,
    /// Encoder output `(n, dim, h, w)`.
    pub z_e: Tensor,
    /// Selected codebook rows `(n, dim, h, w)`.
    pub z_q: Tensor,
    /// Flat token ids, `n * h * w`.
    pub indices: Tensor,
}

#[derive(Clone, Debug)]
pub struct VqModel {
    cfg: VQConfig,
    domain: Domain,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Tensor,
    params: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
}

impl VqModel {
    /// Freshly initialised model.
    pub fn new(domain: Domain, cfg: VQConfig, dtype: DType, trainable: bool) -> Result<Self> {
        let pb = ParamBuilder::random(cfg.seed, dtype, trainable);
        Self::build(domain, cfg, &pb)
    }

    pub fn from_tensors(domain: Domain, cfg: VQConfig, tensors: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let pb = ParamBuilder::from_tensors(tensors, dtype, false);
        Self::build(domain, cfg, &pb)
    }

    fn build(domain: Domain, cfg: VQConfig, pb: &ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let steps = cfg.downsample_steps()?;
        let (c, hid) = (domain.channels(), cfg.hidden_channels);
        let enc = pb.pp("encoder");
        let mut down = Vec::with_capacity(steps);
        for i in 0..steps {
            let cin = if i == 0 { c } else { hid };
            down.push(Conv2d::new(&enc.pp(&format!("down{i}")), cin, hid, 3, 2, 1)?);
        }
        let encoder = Encoder {
            mid: Conv2d::new(&enc.pp("mid"), if steps == 0 { c } else { hid }, hid, 3, 1, 1)?,
            down,
            head: Conv2d::new(&enc.pp("head"), hid, cfg.code_dim, 1, 1, 0)?,
        };
        let dec = pb.pp("decoder");
        let mut up = Vec::with_capacity(steps.max(1));
        for i in 0..steps.max(1) {
            let cout = if i + 1 == steps.max(1) { c } else { hid };
            up.push(Conv2d::new(&dec.pp(&format!("up{i}")), hid, cout, 3, 1, 1)?);
        }
        let decoder = Decoder {
            stem: Conv2d::new(&dec.pp("stem"), cfg.code_dim, hid, 1, 1, 0)?,
            mid: Conv2d::new(&dec.pp("mid"), hid, hid, 3, 1, 1)?,
            up,
        };
        let bound = 1.0 / cfg.codebook_size as f64;
        let codebook = pb.get("codebook", (cfg.codebook_size, cfg.code_dim), Init::Uniform { lo: -bound, hi: bound })?;
        Ok(Self { cfg, domain, encoder, decoder, codebook, params: pb.tensors(), vars: pb.vars() })
    }

    pub fn config(&self) -> &VQConfig {
        &self.cfg
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dtype(&self) -> DType {
        self.codebook.dtype()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn codebook_tensor(&self) -> &Tensor {
        &self.codebook
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::from_tensor(&self.codebook)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let r = self.cfg.resolution;
        if (c, h, w) != (self.domain.channels(), r, r) {
            return Err(CogsError::Shape(format!(
                "{:?} model expects {}x{r}x{r}, got {c}x{h}x{w}",
                self.domain,
                self.domain.channels()
            )));
        }
        Ok(())
    }

    /// `(n, c, H, W)` rasters to `(n, dim, h, w)` continuous latents.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for conv in &self.encoder.down {
            h = conv.forward(&h)?.silu()?;
        }
        h = self.encoder.mid.forward(&h)?.silu()?;
        self.encoder.head.forward(&h)
    }

    /// `(n, dim, h, w)` latents to unclamped `(n, c, H, W)` rasters centred on 0.5.
    pub fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.decoder.stem.forward(z)?.silu()?;
        h = self.decoder.mid.forward(&h)?.silu()?;
        let last = self.decoder.up.len() - 1;
        let upsample = self.cfg.downsample_steps()? > 0;
        for (i, conv) in self.decoder.up.iter().enumerate() {
            if upsample {
                let (_, _, hh, ww) = h.dims4()?;
                h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
            }
            h = conv.forward(&h)?;
            if i < last {
                h = h.silu()?;
            }
        }
        Ok((h + 0.5)?)
    }

    /// Nearest-row assignment for every cell of `(n, dim, h, w)` latents; flat `u32` ids.
    pub fn assign(&self, z_e: &Tensor) -> Result<Tensor> {
        let (n, d, h, w) = z_e.dims4()?;
        let cb = self.codebook()?;
        if d != cb.dim {
            return Err(CogsError::DimensionMismatch { expected: cb.dim, actual: d });
        }
        let rows: Vec<f32> = z_e.permute((0, 2, 3, 1))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let ids: Vec<u32> = rows.chunks(d).map(|r| cb.nearest(r)).collect();
        Ok(Tensor::from_vec(ids, n * h * w, &Device::Cpu)?)
    }

    /// Codebook rows for flat ids, laid out as `(n, dim, h, w)`.
    pub fn lookup(&self, ids: &Tensor, n: usize) -> Result<Tensor> {
        let g = self.cfg.grid_size;
        let rows = self.codebook.index_select(ids, 0)?;
        Ok(rows.reshape((n, g, g, self.cfg.code_dim))?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    /// Encoder, quantiser and decoder with the straight-through estimator.
    pub fn forward(&self, x: &Tensor, frozen: Option<&FrozenQuantization>) -> Result<VqForward> {
        let n = x.dim(0)?;
        let z_e = self.encode_tensor(x)?;
        let indices = match frozen {
            Some(f) => f.indices.clone(),
            None => self.assign(&z_e)?,
        };
        let z_q = self.lookup(&indices, n)?;
        let offset = match frozen {
            Some(f) => (&f.z_q - &f.z_e)?,
            None => (&z_q - &z_e)?.detach(),
        };
        let x_hat = self.decode_latents(&(&z_e + offset)?)?;
        Ok(VqForward { x_hat, z_e, z_q, indices })
    }

    pub fn freeze(fwd: &VqForward) -> FrozenQuantization {
        FrozenQuantization { indices: fwd.indices.clone(), z_e: fwd.z_e.detach(), z_q: fwd.z_q.detach() }
    }

    /// Reconstruction, codebook, commitment and perceptual terms.
    pub fn loss_terms(
        &self,
        x: &Tensor,
        fwd: &VqForward,
        style: Option<&StyleEncoder>,
        frozen: Option<&FrozenQuantization>,
    ) -> Result<VqLossTerms> {
        let (sg_e, sg_q) = match frozen {
            Some(f) => (f.z_e.clone(), f.z_q.clone()),
            None => (fwd.z_e.detach(), fwd.z_q.detach()),
        };
        let abs = (x - &fwd.x_hat)?.abs()?;
        let reconstruction = if self.domain == Domain::Sketch && self.cfg.stroke_weight != 1.0 {
            let w = x.affine(self.cfg.stroke_weight - 1.0, 1.0)?;
            ((abs * &w)?.sum_all()? / w.sum_all()?)?
        } else {
            abs.mean_all()?
        };
        let codebook = (&sg_e - &fwd.z_q)?.sqr()?.mean_all()?;
        let commitment = (&fwd.z_e - &sg_q)?.sqr()?.mean_all()?;
        let perceptual = match style {
            Some(enc) if self.cfg.perceptual_weight > 0.0 => perceptual_loss(enc, x, &fwd.x_hat)?,
            _ => reconstruction.zeros_like()?,
        };
        let total = (((&reconstruction + &codebook)? + (&commitment * self.cfg.commitment_beta)?)?
            + (&perceptual * self.cfg.perceptual_weight)?)?;
        Ok(VqLossTerms { reconstruction, codebook, commitment, perceptual, total })
    }

    fn raster_tensor(&self, rasters: &[&Raster]) -> Result<Tensor> {
        for r in rasters {
            if r.channels != self.domain.channels() {
                return Err(CogsError::Shape(format!(
                    "{:?} model expects {} channel(s), got {}",
                    self.domain,
                    self.domain.channels(),
                    r.channels
                )));
            }
        }
        rasters_to_tensor(rasters, self.dtype(), &Device::Cpu)
    }

    pub fn encode(&self, raster: &Raster) -> Result<LatentGrid> {
        let z = self.encode_tensor(&self.raster_tensor(&[raster])?)?;
        Ok(LatentGrid::from_tensor(&z)?.remove(0))
    }

    /// Token grids for a batch of rasters.
    pub fn tokenize(&self, rasters: &[&Raster]) -> Result<Vec<TokenGrid>> {
        let g = self.cfg.grid_size;
        let mut out = Vec::with_capacity(rasters.len());
        for chunk in rasters.chunks(64) {
            let z = self.encode_tensor(&self.raster_tensor(chunk)?)?;
            let ids: Vec<u32> = self.assign(&z)?.to_vec1()?;
            out.extend(ids.chunks(g * g).map(|c| TokenGrid { height: g, width: g, indices: c.to_vec() }));
        }
        Ok(out)
    }

    fn ids_tensor(&self, grids: &[&TokenGrid]) -> Result<Tensor> {
        let g = self.cfg.grid_size;
        let mut ids = Vec::with_capacity(grids.len() * g * g);
        for t in grids {
            if (t.height, t.width) != (g, g) {
                return Err(CogsError::Shape(format!("token grid {}x{} vs {g}x{g}", t.height, t.width)));
            }
            t.validate(self.cfg.codebook_size)?;
            ids.extend_from_slice(&t.indices);
        }
        Ok(Tensor::from_vec(ids, grids.len() * g * g, &Device::Cpu)?)
    }

    /// Rasters for token grids; errors on out-of-range indices.
    pub fn decode_batch(&self, grids: &[&TokenGrid]) -> Result<Vec<Raster>> {
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(64) {
            let ids = self.ids_tensor(chunk)?;
            out.extend(tensor_to_rasters(&self.decode_latents(&self.lookup(&ids, chunk.len())?)?)?);
        }
        Ok(out)
    }

    pub fn decode(&self, tokens: &TokenGrid) -> Result<Raster> {
        Ok(self.decode_batch(&[tokens])?.remove(0))
    }

    /// Quantised latent grid (codebook rows) for a token grid.
    pub fn latents_for(&self, tokens: &TokenGrid) -> Result<LatentGrid> {
        let ids = self.ids_tensor(&[tokens])?;
        Ok(LatentGrid::from_tensor(&self.lookup(&ids, 1)?)?.remove(0))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let f32: BTreeMap<String, Tensor> =
            self.params.iter().map(|(k, v)| Ok((k.clone(), v.to_dtype(DType::F32)?))).collect::<Result<_>>()?;
        Ok(Archive::with_tensors(
            serde_json::json!({"kind": "vq", "domain": self.domain, "config": self.cfg}),
            f32,
        ))
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = &archive.metadata;
        if meta["kind"] != "vq" {
            return Err(CogsError::Archive("not a vq checkpoint".into()));
        }
        let domain: Domain = serde_json::from_value(meta["domain"].clone())?;
        let cfg: VQConfig = serde_json::from_value(meta["config"].clone())?;
        Self::from_tensors(domain, cfg, archive.tensors.clone(), DType::F32)
    }
}

/// Squared feature distance between two batches, summed over both conv layers.
pub fn perceptual_loss(enc: &StyleEncoder, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (a1, a2) = enc.feature_maps(x)?;
    let (b1, b2) = enc.feature_maps(y)?;
    Ok(((a1 - b1)?.sqr()?.mean_all()? + (a2 - b2)?.sqr()?.mean_all()?)?)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct VqTrainReport {
    /// Mean total loss over the training set before the first update.
    pub initial_loss: f64,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean L1 reconstruction error per epoch.
    pub epoch_reconstruction: Vec<f64>,
    pub initial_usage_entropy: f64,
    pub final_usage_entropy: f64,
    pub reinitialized_codes: usize,
}

/// Training rasters for a domain from a manifest split.
pub fn domain_rasters(manifest: &Manifest, domain: Domain, split: Split) -> Vec<Raster> {
    manifest
        .records
        .iter()
        .filter(|(img, _)| img.split == split)
        .map(|(img, sk)| match domain {
            Domain::Image => img.pixels.clone(),
            Domain::Sketch => Raster::from_mask(&sk.pixels),
        })
        .collect()
}

fn eval_loss(model: &VqModel, data: &[Raster], style: &StyleEncoder, bs: usize) -> Result<(f64, Vec<usize>)> {
    let mut total = 0.0;
    let mut hist = vec![0usize; model.cfg.codebook_size];
    for chunk in data.chunks(bs) {
        let refs: Vec<&Raster> = chunk.iter().collect();
        let x = model.raster_tensor(&refs)?;
        let fwd = model.forward(&x, None)?;
        let terms = model.loss_terms(&x, &fwd, Some(style), None)?;
        total += scalar(&terms.total)? * chunk.len() as f64;
        for id in fwd.indices.to_vec1::<u32>()? {
            hist[id as usize] += 1;
        }
    }
    Ok((total / data.len() as f64, hist))
}

/// Trains a VQ model on the training split of `manifest`.
///
/// Codebook entries unused for a whole epoch are re-seeded from encoder
/// outputs of that epoch.
pub fn train_vq(manifest: &Manifest, domain: Domain, cfg: &VQConfig, style: &StyleEncoder) -> Result<(VqModel, VqTrainReport)> {
    let data = domain_rasters(manifest, domain, Split::Train);
    if data.is_empty() {
        return Err(CogsError::InvalidInput("no training images".into()));
    }
    let model = VqModel::new(domain, cfg.clone(), DType::F32, true)?;
    let mut opt = Adam::new(model.vars(), cfg.learning_rate, cfg.clip_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let (initial_loss, hist0) = eval_loss(&model, &data, style, cfg.batch_size)?;
    let mut report = VqTrainReport {
        initial_loss,
        initial_usage_entropy: usage_entropy(&hist0),
        ..Default::default()
    };
    let codebook_var = model.vars().get("codebook").cloned().expect("trainable model has a codebook var");
    seed_codebook(&model, &codebook_var, &data, &mut rng)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![false; cfg.codebook_size];
        let mut recent: Vec<f32> = Vec::new();
        let (mut sum, mut sum_rec) = (0.0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Raster> = batch.iter().map(|&i| &data[i]).collect();
            let x = model.raster_tensor(&refs)?;
            let fwd = model.forward(&x, None)?;
            let terms = model.loss_terms(&x, &fwd, Some(style), None)?;
            let loss = scalar(&terms.total)?;
            if !loss.is_finite() {
                return Err(CogsError::Diverged { epoch, step, loss });
            }
            for id in fwd.indices.to_vec1::<u32>()? {
                used[id as usize] = true;
            }
            recent = fwd.z_e.permute((0, 2, 3, 1))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            opt.backward_step(&terms.total)?;
            sum += loss * batch.len() as f64;
            sum_rec += scalar(&terms.reconstruction)? * batch.len() as f64;
        }
        report.epoch_loss.push(sum / data.len() as f64);
        report.epoch_reconstruction.push(sum_rec / data.len() as f64);
        log::info!(
            "vq[{domain:?}] epoch {epoch}: loss {:.5} recon {:.5}",
            report.epoch_loss[epoch],
            report.epoch_reconstruction[epoch]
        );
        let dead: Vec<usize> = (0..cfg.codebook_size).filter(|&k| !used[k]).collect();
        if cfg.reinit_dead_codes && !dead.is_empty() && epoch + 1 < cfg.epochs {
            let d = cfg.code_dim;
            let n_rows = recent.len() / d;
            let mut cb: Vec<f32> = codebook_var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            for &k in &dead {
                let r = rng.random_range(0..n_rows);
                for j in 0..d {
                    cb[k * d + j] = recent[r * d + j] + rng.random_range(-1e-3f32..1e-3);
                }
            }
            let t = Tensor::from_vec(cb, (cfg.codebook_size, d), &Device::Cpu)?.to_dtype(codebook_var.dtype())?;
            codebook_var.set(&t)?;
            report.reinitialized_codes += dead.len();
        }
    }
    let (_, hist) = eval_loss(&model, &data, style, cfg.batch_size)?;
    report.final_usage_entropy = usage_entropy(&hist);
    Ok((model, report))
}

/// Places every codebook row on a distinct encoder output drawn from `data`,
/// so training starts with the codes where the encoder puts its mass.
fn seed_codebook(model: &VqModel, var: &Var, data: &[Raster], rng: &mut ChaCha8Rng) -> Result<()> {
    let (k, d) = (model.cfg.codebook_size, model.cfg.code_dim);
    let mut picks: Vec<usize> = (0..data.len()).collect();
    picks.shuffle(rng);
    let refs: Vec<&Raster> = picks.iter().take(k.div_ceil(model.cfg.tokens()) * 4).map(|&i| &data[i]).collect();
    let z = model.encode_tensor(&model.raster_tensor(&refs)?)?;
    let rows: Vec<f32> = z.permute((0, 2, 3, 1))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut order: Vec<usize> = (0..rows.len() / d).collect();
    order.shuffle(rng);
    let mut cb = Vec::with_capacity(k * d);
    for &r in order.iter().cycle().take(k) {
        cb.extend(rows[r * d..(r + 1) * d].iter().map(|v| v + rng.random_range(-1e-3f32..1e-3)));
    }
    var.set(&Tensor::from_vec(cb, (k, d), &Device::Cpu)?.to_dtype(var.dtype())?)?;
    Ok(())
}

/// Mean absolute error of reconstructing each raster through the codebook,
/// alongside the error of predicting the per-pixel mean of `reference`.
pub fn reconstruction_vs_mean(model: &VqModel, data: &[Raster], reference: &[Raster]) -> Result<(f64, f64)> {
    let refs: Vec<&Raster> = data.iter().collect();
    let tokens = model.tokenize(&refs)?;
    let grids: Vec<&TokenGrid> = tokens.iter().collect();
    let recon = model.decode_batch(&grids)?;
    let model_err = data.iter().zip(&recon).map(|(a, b)| a.mean_abs_diff(b)).sum::<f64>() / data.len() as f64;
    let mut mean = reference[0].clone();
    for (i, v) in mean.data.iter_mut().enumerate() {
        *v = (reference.iter().map(|r| r.data[i] as f64).sum::<f64>() / reference.len() as f64) as f32;
    }
    let mean_err = data.iter().map(|a| a.mean_abs_diff(&mean)).sum::<f64>() / data.len() as f64;
    Ok((model_err, mean_err))
}
