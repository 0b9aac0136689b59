#![allow(dead_code)]

use densesort_core::{FeatureStore, ObjectRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn store_of(points: &[Vec<f32>]) -> FeatureStore {
    let dim = points.first().map_or(1, Vec::len);
    FeatureStore::from_records(
        dim,
        points.iter().enumerate().map(|(i, p)| ObjectRecord::new(format!("o{i:05}"), p.clone())),
    )
    .unwrap()
}

pub fn as_f64(points: &[Vec<f32>]) -> Vec<Vec<f64>> {
    points.iter().map(|p| p.iter().map(|&x| x as f64).collect()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Integer coordinates in `0..side`: many exact ties and duplicates.
pub fn grid_points(rng: &mut ChaCha8Rng, n: usize, dim: usize, side: i32) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(0..side) as f32).collect()).collect()
}

/// Gaussian-ish blobs quantized to multiples of 1/64 so that every squared
/// distance is exactly representable whatever the summation order.
pub fn quantized_blobs(rng: &mut ChaCha8Rng, n: usize, dim: usize, blobs: usize) -> Vec<Vec<f32>> {
    let centers: Vec<Vec<f64>> = (0..blobs).map(|_| (0..dim).map(|_| rng.random_range(-6.0..6.0)).collect()).collect();
    (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..blobs)];
            let spread = if rng.random_bool(0.1) { 4.0 } else { 0.6 };
            c.iter()
                .map(|&x| {
                    let u: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() * spread / 2.0;
                    ((x + u).clamp(-15.0, 15.0) * 64.0).round() as f32 / 64.0
                })
                .collect()
        })
        .collect()
}

pub fn uniform_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
}
