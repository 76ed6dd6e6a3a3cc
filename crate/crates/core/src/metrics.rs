//! Evaluation: feature statistics, Fréchet distance, diversity, Chamfer
//! structure distance, class partitioning and precision@k.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CogsError, Result};
use crate::imaging::{canny, distance_transform, EdgeConfig};
use crate::raster::{Mask, Raster};
use crate::style::StyleEncoder;

pub use crate::imaging::DistanceField;

/// Tolerance on symmetry and on negative eigenvalues, relative to the matrix scale.
const PSD_TOLERANCE: f64 = 1e-8;

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `m x m`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance; needs at least two vectors.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(CogsError::InvalidInput(format!("need at least 2 feature vectors, got {}", features.len())));
        }
        let m = features[0].len();
        if let Some(bad) = features.iter().find(|f| f.len() != m) {
            return Err(CogsError::DimensionMismatch { expected: m, actual: bad.len() });
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; m];
        for f in features {
            for (a, b) in mean.iter_mut().zip(f) {
                *a += b / n;
            }
        }
        let mut cov = vec![0.0; m * m];
        for f in features {
            for i in 0..m {
                let di = f[i] - mean[i];
                for j in i..m {
                    cov[i * m + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..m {
            for j in i..m {
                let v = cov[i * m + j] / (n - 1.0);
                cov[i * m + j] = v;
                cov[j * m + i] = v;
            }
        }
        Ok(Self { mean, covariance: cov, count: features.len() })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> Result<DMatrix<f64>> {
        let m = self.dim();
        if self.covariance.len() != m * m {
            return Err(CogsError::Shape(format!("covariance has {} entries for dim {m}", self.covariance.len())));
        }
        let c = DMatrix::from_row_slice(m, m, &self.covariance);
        let scale = c.amax().max(1.0);
        if (&c - c.transpose()).amax() > PSD_TOLERANCE * scale {
            return Err(CogsError::InvalidInput("covariance is not symmetric".into()));
        }
        Ok(c)
    }
}

/// Square root of a symmetric PSD matrix; small negative eigenvalues are clamped to zero.
fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (r, &l) in roots.iter_mut().zip(eig.eigenvalues.iter()) {
        if l < -PSD_TOLERANCE * scale {
            return Err(CogsError::NotPsd(l));
        }
        *r = l.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of `(S_a S_b)^(1/2)` is taken as the trace of the square root of
/// the symmetric `S_a^(1/2) S_b S_a^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CogsError::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    let (ca, cb) = (a.matrix()?, b.matrix()?);
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let ra = sqrtm_psd(&ca)?;
    let cross = sqrtm_psd(&(&ra * &cb * &ra))?;
    let d = mean_term + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Feature vectors for distribution metrics: pooled conv statistics of the frozen style stack.
pub fn embed_features(enc: &StyleEncoder, images: &[&Raster]) -> Result<Vec<Vec<f64>>> {
    enc.pooled_batch(images)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance over all unique pairs of feature vectors.
pub fn mean_pairwise_distance(features: &[Vec<f64>]) -> Result<f64> {
    let n = features.len();
    if n < 2 {
        return Err(CogsError::InvalidInput(format!("need at least 2 outputs, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += l2(&features[i], &features[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Mean pairwise feature distance among generated outputs.
pub fn diversity_score(enc: &StyleEncoder, outputs: &[&Raster]) -> Result<f64> {
    mean_pairwise_distance(&embed_features(enc, outputs)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChamferOutcome {
    pub distance: f64,
    /// Set when the image had no edges and the diagonal penalty was returned.
    pub empty_edges: bool,
}

/// Mean distance from each stroke pixel to the nearest pixel of `edges`.
pub fn chamfer_to_edges(sketch: &Mask, edges: &Mask) -> Result<ChamferOutcome> {
    if sketch.is_empty() {
        return Err(CogsError::InvalidInput("sketch has no stroke pixels".into()));
    }
    if (sketch.height, sketch.width) != (edges.height, edges.width) {
        return Err(CogsError::Shape(format!(
            "sketch {}x{} vs edges {}x{}",
            sketch.height, sketch.width, edges.height, edges.width
        )));
    }
    if edges.is_empty() {
        let diagonal = ((sketch.height.pow(2) + sketch.width.pow(2)) as f64).sqrt();
        return Ok(ChamferOutcome { distance: diagonal, empty_edges: true });
    }
    let field = distance_transform(edges)?;
    let (sum, n) = sketch.coords().fold((0.0, 0usize), |(s, n), (y, x)| (s + field.get(y, x), n + 1));
    Ok(ChamferOutcome { distance: sum / n as f64, empty_edges: false })
}

/// One-sided Chamfer distance from a sketch to the Canny edges of an image.
pub fn chamfer_structure(sketch: &Mask, image: &Raster, edges: &EdgeConfig) -> Result<ChamferOutcome> {
    chamfer_to_edges(sketch, &canny(image, edges))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartitions {
    pub simple: Vec<usize>,
    pub medium: Vec<usize>,
    pub complex: Vec<usize>,
}

/// Splits classes into tertiles by ascending score; ties go to the lower class index first.
pub fn partition_classes(scores: &BTreeMap<usize, f64>) -> Result<ClassPartitions> {
    let n = scores.len();
    if n < 3 {
        return Err(CogsError::InvalidInput(format!("need at least 3 classes, got {n}")));
    }
    let mut order: Vec<(usize, f64)> = scores.iter().map(|(&c, &s)| (c, s)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let ids: Vec<usize> = order.into_iter().map(|(c, _)| c).collect();
    let (a, b) = (n / 3, 2 * n / 3);
    Ok(ClassPartitions { simple: ids[..a].to_vec(), medium: ids[a..b].to_vec(), complex: ids[b..].to_vec() })
}

/// Mean fraction of relevant items among the first `k` of each ranked list.
pub fn precision_at_k(relevance: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(CogsError::InvalidInput("k must be positive".into()));
    }
    if relevance.is_empty() {
        return Err(CogsError::InvalidInput("no queries".into()));
    }
    let mut total = 0.0;
    for (q, list) in relevance.iter().enumerate() {
        if list.len() < k {
            return Err(CogsError::InvalidInput(format!("query {q} has {} results, need {k}", list.len())));
        }
        total += list[..k].iter().filter(|&&r| r).count() as f64 / k as f64;
    }
    Ok(total / relevance.len() as f64)
}
