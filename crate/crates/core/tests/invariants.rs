use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use cogs_core::archive::Archive;
use cogs_core::imaging::distance_transform;
use cogs_core::metrics::{frechet_distance, partition_classes, precision_at_k, GaussianStats};
use cogs_core::raster::Mask;
use cogs_core::refine::{interior_grid, interpolate, kl_divergence, retrieve, EmbeddingIndex, EntrySource, InterpolationPath};
use cogs_core::vq::{quantize, Codebook, LatentGrid};
use proptest::prelude::*;

fn vectors(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), n)
}

fn mask(size: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), size * size).prop_filter("needs an edge", |v| v.iter().any(|&b| b)).prop_map(
        move |bits| {
            let mut m = Mask::new(size, size);
            for (i, &b) in bits.iter().enumerate() {
                m.set(i / size, i % size, b);
            }
            m
        },
    )
}

fn index_of(points: &[Vec<f64>]) -> EmbeddingIndex {
    let mut index = EmbeddingIndex::new(0, points[0].len());
    for (i, p) in points.iter().enumerate() {
        let source = if i % 2 == 0 { EntrySource::Real } else { EntrySource::Generated };
        index.insert(format!("id-{i:04}"), p.clone(), source).unwrap();
    }
    index
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieval_is_sorted_nonnegative_and_bounded(points in vectors(1..60, 4), query in prop::collection::vec(-5.0f64..5.0, 4), k in 1usize..80) {
        let index = index_of(&points);
        let out = retrieve(&query, &index, k).unwrap();
        prop_assert_eq!(out.hits.len(), k.min(points.len()));
        prop_assert_eq!(out.truncated, k > points.len());
        for w in out.hits.windows(2) {
            prop_assert!(w[0].distance < w[1].distance || (w[0].distance == w[1].distance && w[0].id < w[1].id));
        }
        prop_assert!(out.hits.iter().all(|h| h.distance >= 0.0));
    }

    #[test]
    fn quantized_cell_is_never_farther_than_any_entry(
        entries in prop::collection::vec(-2.0f32..2.0, 8 * 3),
        cells in prop::collection::vec(-2.0f32..2.0, 5 * 3),
    ) {
        let cb = Codebook::new(8, 3, entries.clone()).unwrap();
        let grid = LatentGrid { height: 1, width: 5, dim: 3, values: cells.clone() };
        let (tokens, snapped) = quantize(&grid, &cb).unwrap();
        let d = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>();
        for (i, cell) in cells.chunks(3).enumerate() {
            let chosen = tokens.indices[i] as usize;
            prop_assert_eq!(&snapped.values[i * 3..i * 3 + 3], &entries[chosen * 3..chosen * 3 + 3]);
            let best = d(cell, &entries[chosen * 3..chosen * 3 + 3]);
            prop_assert!(entries.chunks(3).all(|row| best <= d(cell, row)));
        }
    }

    #[test]
    fn interpolation_hits_endpoints_and_stays_on_segment(a in prop::collection::vec(-3.0f64..3.0, 5), b in prop::collection::vec(-3.0f64..3.0, 5), t in 0.0f64..1.0) {
        for path in [InterpolationPath::Linear, InterpolationPath::Spherical] {
            prop_assert_eq!(interpolate(&a, &b, 0.0, path), a.clone());
            prop_assert_eq!(interpolate(&a, &b, 1.0, path), b.clone());
        }
        let p = interpolate(&a, &b, t, InterpolationPath::Linear);
        for ((x, y), v) in a.iter().zip(&b).zip(&p) {
            prop_assert!(*v >= x.min(*y) - 1e-12 && *v <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn interior_grid_is_strictly_inside_and_increasing(n in 0usize..50) {
        let g = interior_grid(n);
        prop_assert_eq!(g.len(), n);
        prop_assert!(g.iter().all(|&t| t > 0.0 && t < 1.0));
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn distance_field_is_one_lipschitz_and_zero_on_edges(m in mask(12)) {
        let field = distance_transform(&m).unwrap();
        for y in 0..12 {
            for x in 0..12 {
                let v = field.get(y, x);
                prop_assert_eq!(v == 0.0, m.get(y, x));
                if x + 1 < 12 { prop_assert!((v - field.get(y, x + 1)).abs() <= 1.0 + 1e-12); }
                if y + 1 < 12 { prop_assert!((v - field.get(y + 1, x)).abs() <= 1.0 + 1e-12); }
            }
        }
    }

    #[test]
    fn frechet_is_symmetric_nonnegative_and_zero_on_self(a in vectors(4..20, 3), b in vectors(4..20, 3)) {
        let (sa, sb) = (GaussianStats::fit(&a).unwrap(), GaussianStats::fit(&b).unwrap());
        let ab = frechet_distance(&sa, &sb).unwrap();
        let ba = frechet_distance(&sb, &sa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab));
        prop_assert!(frechet_distance(&sa, &sa).unwrap().abs() < 1e-6);
    }

    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-4.0f64..4.0, 6), ls in prop::collection::vec(-3.0f64..2.0, 6)) {
        let mu = Tensor::from_vec(mu, (2, 3), &Device::Cpu).unwrap();
        let ls = Tensor::from_vec(ls, (2, 3), &Device::Cpu).unwrap();
        let kl: f64 = kl_divergence(&mu, &ls).unwrap().to_scalar().unwrap();
        prop_assert!(kl >= 0.0);
    }

    #[test]
    fn index_survives_an_archive_roundtrip(points in vectors(1..30, 3)) {
        let index = index_of(&points);
        let bytes = index.to_archive().unwrap().to_bytes().unwrap();
        let back = EmbeddingIndex::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back, index);
    }

    #[test]
    fn partitions_cover_every_class_in_score_order(scores in prop::collection::btree_map(0usize..40, 0.0f64..100.0, 3..40)) {
        let p = partition_classes(&scores).unwrap();
        let all: Vec<usize> = p.simple.iter().chain(&p.medium).chain(&p.complex).copied().collect();
        prop_assert_eq!(all.len(), scores.len());
        prop_assert!(all.windows(2).all(|w| scores[&w[0]] <= scores[&w[1]]));
        let n = scores.len();
        prop_assert_eq!((p.simple.len(), p.medium.len()), (n / 3, 2 * n / 3 - n / 3));
    }

    #[test]
    fn precision_stays_in_unit_interval(rel in prop::collection::vec(prop::collection::vec(any::<bool>(), 8..12), 1..10), k in 1usize..8) {
        let p = precision_at_k(&rel, k).unwrap();
        let full: Vec<Vec<bool>> = rel.iter().map(|r| vec![true; r.len()]).collect();
        prop_assert_eq!(precision_at_k(&full, k).unwrap(), 1.0);
        prop_assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn archive_rejects_truncated_bytes() {
    let mut tensors = BTreeMap::new();
    tensors.insert("w".to_string(), Tensor::from_vec(vec![1.0f64, 2.0, 3.0], 3, &Device::Cpu).unwrap());
    let bytes = Archive::with_tensors(serde_json::json!({"kind": "test"}), tensors).to_bytes().unwrap();
    assert!(Archive::from_bytes(&bytes[..bytes.len() - 4]).is_err());
}
