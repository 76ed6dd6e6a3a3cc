//! Low-level raster operations shared by the sketch pipeline and the metrics:
//! Gaussian blur, colour Canny edges, and the exact Euclidean distance transform.

use serde::{Deserialize, Serialize};

use crate::error::{CogsError, Result};
use crate::raster::{Mask, Raster};

/// Normalised 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with replicated borders, applied per channel.
pub fn gaussian_blur(img: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w, c) = img.shape();
    let clampi = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;

    let mut tmp = Raster::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for (j, kv) in k.iter().enumerate() {
                    let xx = clampi(x as i64 + j as i64 - r, w);
                    acc += kv * img.get(y, xx, ch);
                }
                tmp.set(y, x, ch, acc);
            }
        }
    }
    let mut out = Raster::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for (j, kv) in k.iter().enumerate() {
                    let yy = clampi(y as i64 + j as i64 - r, h);
                    acc += kv * tmp.get(yy, x, ch);
                }
                out.set(y, x, ch, acc);
            }
        }
    }
    out
}

/// Canny parameters. Thresholds are fractions of the image's maximum gradient magnitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    /// Pre-smoothing sigma; 0 disables smoothing.
    pub smoothing_sigma: f64,
    pub low_threshold: f64,
    pub high_threshold: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self { smoothing_sigma: 1.0, low_threshold: 0.1, high_threshold: 0.3 }
    }
}

struct Gradients {
    mag: Vec<f32>,
    gx: Vec<f32>,
    gy: Vec<f32>,
}

/// Sobel gradients; for multi-channel input each pixel takes the channel with the largest response.
fn sobel(img: &Raster) -> Gradients {
    let (h, w, c) = img.shape();
    let mut mag = vec![0.0f32; h * w];
    let mut gx = vec![0.0f32; h * w];
    let mut gy = vec![0.0f32; h * w];
    let at = |y: i64, x: i64, ch: usize| {
        let yy = y.clamp(0, h as i64 - 1) as usize;
        let xx = x.clamp(0, w as i64 - 1) as usize;
        img.get(yy, xx, ch)
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            for ch in 0..c {
                let dx = (at(y - 1, x + 1, ch) + 2.0 * at(y, x + 1, ch) + at(y + 1, x + 1, ch))
                    - (at(y - 1, x - 1, ch) + 2.0 * at(y, x - 1, ch) + at(y + 1, x - 1, ch));
                let dy = (at(y + 1, x - 1, ch) + 2.0 * at(y + 1, x, ch) + at(y + 1, x + 1, ch))
                    - (at(y - 1, x - 1, ch) + 2.0 * at(y - 1, x, ch) + at(y - 1, x + 1, ch));
                let m = (dx * dx + dy * dy).sqrt();
                if m > mag[i] {
                    mag[i] = m;
                    gx[i] = dx;
                    gy[i] = dy;
                }
            }
        }
    }
    Gradients { mag, gx, gy }
}

/// Canny edge detector: smoothing, Sobel, non-maximum suppression, hysteresis.
pub fn canny(img: &Raster, cfg: &EdgeConfig) -> Mask {
    let (h, w, _) = img.shape();
    let smoothed = gaussian_blur(img, cfg.smoothing_sigma);
    let Gradients { mag, gx, gy } = sobel(&smoothed);

    let max = mag.iter().copied().fold(0.0f32, f32::max);
    let mut edges = Mask::new(h, w);
    if max <= 1e-6 {
        return edges;
    }

    let m = |y: i64, x: i64| -> f32 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0f32; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let v = mag[i];
            if v == 0.0 {
                continue;
            }
            // direction bucket of the gradient, in image coordinates (y down)
            let angle = (gy[i] as f64).atan2(gx[i] as f64).to_degrees();
            let a = if angle < 0.0 { angle + 180.0 } else { angle };
            let (dy, dx) = if !(22.5..157.5).contains(&a) {
                (0, 1)
            } else if a < 67.5 {
                (1, 1)
            } else if a < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let before = m(y - dy, x - dx);
            let after = m(y + dy, x + dx);
            // strict on one side so a two-pixel plateau keeps exactly one pixel
            if v > before && v >= after {
                thin[i] = v;
            }
        }
    }

    let hi = (cfg.high_threshold * max as f64) as f32;
    let lo = (cfg.low_threshold * max as f64) as f32;
    let mut stack: Vec<usize> = Vec::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= hi && v > 0.0 {
            edges.data[i] = true;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges.data[j] && thin[j] >= lo && thin[j] > 0.0 {
                    edges.data[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    edges
}

/// Per-pixel Euclidean distance to the nearest set pixel of an edge map.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DistanceField {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Squared distance transform of a sampled function along one line
/// (lower envelope of parabolas). Infinite entries carry no parabola.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance transform; all values are exact integers.
pub fn squared_distance_transform(edges: &Mask) -> Result<Vec<f64>> {
    if edges.is_empty() {
        return Err(CogsError::EmptyEdges);
    }
    let (h, w) = (edges.height, edges.width);
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut buf_in = vec![0.0f64; n];
    let mut buf_out = vec![0.0f64; n];

    let mut grid: Vec<f64> = edges.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    for y in 0..h {
        buf_in[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&buf_in[..w], &mut buf_out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&buf_out[..w]);
    }
    for x in 0..w {
        for y in 0..h {
            buf_in[y] = grid[y * w + x];
        }
        edt_1d(&buf_in[..h], &mut buf_out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = buf_out[y];
        }
    }
    Ok(grid)
}

/// Exact Euclidean distance transform of an edge map.
pub fn distance_transform(edges: &Mask) -> Result<DistanceField> {
    let sq = squared_distance_transform(edges)?;
    Ok(DistanceField { height: edges.height, width: edges.width, values: sq.into_iter().map(f64::sqrt).collect() })
}

/// Dilates a mask by a Euclidean disk of the given radius. An empty mask stays empty.
pub fn dilate(mask: &Mask, radius: f64) -> Mask {
    match squared_distance_transform(mask) {
        Ok(sq) => {
            let r2 = radius * radius;
            Mask { height: mask.height, width: mask.width, data: sq.into_iter().map(|d| d <= r2).collect() }
        }
        Err(_) => mask.clone(),
    }
}
