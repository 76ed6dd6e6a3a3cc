//! Dense raster and binary mask types, PNG codecs, and tensor conversion.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{CogsError, Result};

/// Row-major `height × width × channels` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(CogsError::Shape(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extracts one channel as a single-channel raster.
    pub fn channel(&self, c: usize) -> Raster {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Raster { height: self.height, width: self.width, channels: 1, data }
    }

    /// Snaps every value to the nearest multiple of 1/255 so PNG storage is lossless.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn mean_abs_diff(&self, other: &Raster) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        s / self.data.len() as f64
    }

    pub fn from_mask(mask: &Mask) -> Raster {
        let data = mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Raster { height: mask.height, width: mask.width, channels: 1, data }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut out);
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(CogsError::Shape(format!("cannot encode {c}-channel raster as PNG"))),
        };
        image::ImageEncoder::write_image(enc, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8], channels: usize) -> Result<Raster> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(match channels {
            1 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                let data = g.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
                Raster { height: h as usize, width: w as usize, channels: 1, data }
            }
            3 => {
                let g = img.to_rgb8();
                let (w, h) = g.dimensions();
                let data = g.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
                Raster { height: h as usize, width: w as usize, channels: 3, data }
            }
            c => return Err(CogsError::Shape(format!("unsupported channel count {c}"))),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => {
                let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                    .ok_or_else(|| CogsError::Shape("png buffer".into()))?;
                img.save(path)?;
            }
            3 => {
                let img: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                    .ok_or_else(|| CogsError::Shape("png buffer".into()))?;
                img.save(path)?;
            }
            c => return Err(CogsError::Shape(format!("cannot save {c}-channel raster"))),
        }
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<Raster> {
        let bytes = std::fs::read(path)?;
        Self::from_png_bytes(&bytes, channels)
    }
}

/// Binary `height × width` map; `true` marks a set pixel (stroke, edge, salient).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![true; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Mask { height: self.height, width: self.width, data }
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / self.width, i % self.width))
    }

    /// Thresholds a single-channel raster at 0.5.
    pub fn from_raster(r: &Raster) -> Result<Mask> {
        if r.channels != 1 {
            return Err(CogsError::Shape(format!("mask needs 1 channel, got {}", r.channels)));
        }
        let data = r.data.iter().map(|&v| v >= 0.5).collect();
        Ok(Mask { height: r.height, width: r.width, data })
    }
}

/// Stacks rasters into an `(n, c, h, w)` tensor.
pub fn rasters_to_tensor(rasters: &[&Raster], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = rasters.first().ok_or_else(|| CogsError::InvalidInput("empty raster batch".into()))?;
    let (h, w, c) = first.shape();
    let mut buf = Vec::with_capacity(rasters.len() * h * w * c);
    for r in rasters {
        if r.shape() != (h, w, c) {
            return Err(CogsError::Shape(format!("batch mixes {:?} and {:?}", (h, w, c), r.shape())));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    buf.push(r.get(y, x, ch));
                }
            }
        }
    }
    Ok(Tensor::from_vec(buf, (rasters.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`rasters_to_tensor`]; values are clamped to `[0, 1]`.
pub fn tensor_to_rasters(t: &Tensor) -> Result<Vec<Raster>> {
    let (n, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = Raster::filled(h, w, c, 0.0);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = flat[((i * c + ch) * h + y) * w + x];
                    r.set(y, x, ch, v.clamp(0.0, 1.0));
                }
            }
        }
        out.push(r);
    }
    Ok(out)
}
