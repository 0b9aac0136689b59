//! Synthetic long-tailed datasets: Gaussian blobs with Zipf-distributed
//! sizes, optional holdout classes and uniform background noise.

use std::path::Path;

use densesort_core::features::{save_features, DatasetRole};
use densesort_core::{Error, FeatureStore, ObjectRecord, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of classes, holdouts included.
    pub class_count: usize,
    /// Total number of objects, noise included.
    pub object_count: usize,
    /// Size of the class with Zipf rank r is proportional to r^-exponent.
    pub zipf_exponent: f64,
    pub dim: usize,
    /// Per-dimension standard deviation of every class blob.
    pub cluster_sigma: f64,
    /// Minimum distance between class centers, in units of `cluster_sigma`.
    pub separation: f64,
    /// Fraction of objects drawn uniformly over the data region, unlabeled.
    pub noise_fraction: f64,
    /// Class ids (0-based) withheld as indicator classes. They take
    /// `holdout_fraction` of the objects each and stay out of the Zipf law.
    pub holdout_classes: Vec<usize>,
    pub holdout_fraction: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            class_count: 20,
            object_count: 50_000,
            zipf_exponent: 1.2,
            dim: 32,
            cluster_sigma: 1.0,
            separation: 10.0,
            noise_fraction: 0.02,
            holdout_classes: Vec::new(),
            holdout_fraction: 0.005,
            rng_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Value(msg.to_string()));
        if self.class_count == 0 {
            return bad("class_count must be positive");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be finite and non-negative");
        }
        if !(self.cluster_sigma.is_finite() && self.cluster_sigma > 0.0) {
            return bad("cluster_sigma must be positive");
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return bad("separation must be non-negative");
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return bad("noise_fraction must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        let mut seen = vec![false; self.class_count];
        for &h in &self.holdout_classes {
            if h >= self.class_count || std::mem::replace(&mut seen[h], true) {
                return bad("holdout_classes must be distinct class ids below class_count");
            }
        }
        if self.holdout_classes.len() == self.class_count {
            return bad("at least one class must follow the Zipf law");
        }
        Ok(())
    }

    pub fn class_label(class: usize) -> String {
        format!("class-{class:02}")
    }

    /// Objects per class, indexed by class id.
    pub fn class_sizes(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let noise = (self.noise_fraction * self.object_count as f64).round() as usize;
        let holdout = (self.holdout_fraction * self.object_count as f64).round() as usize;
        let zipf_classes = self.class_count - self.holdout_classes.len();
        let zipf_total = self
            .object_count
            .checked_sub(noise + holdout * self.holdout_classes.len())
            .ok_or_else(|| Error::Value("noise and holdouts exceed the object count".into()))?;
        let zipf = zipf_sizes(zipf_total, zipf_classes, self.zipf_exponent)?;
        let mut ranks = zipf.into_iter();
        let sizes: Vec<usize> = (0..self.class_count)
            .map(|c| if self.holdout_classes.contains(&c) { holdout } else { ranks.next().expect("one size per class") })
            .collect();
        if sizes.contains(&0) {
            return Err(Error::Value("spec leaves a class without objects".into()));
        }
        Ok(sizes)
    }
}

/// Splits `total` into `classes` sizes proportional to rank^-exponent,
/// rounded, with the rounding remainder given to the largest class.
pub fn zipf_sizes(total: usize, classes: usize, exponent: f64) -> Result<Vec<usize>> {
    if classes == 0 {
        return Err(Error::Value("need at least one class".into()));
    }
    let weights: Vec<f64> = (1..=classes).map(|r| (r as f64).powf(-exponent)).collect();
    let norm: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights.iter().map(|w| (total as f64 * w / norm).round() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    if assigned > total {
        let excess = assigned - total;
        if sizes[0] < excess {
            return Err(Error::Value("rounding exceeds the largest class".into()));
        }
        sizes[0] -= excess;
    } else {
        sizes[0] += total - assigned;
    }
    Ok(sizes)
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    /// Objects in shuffled order with truth labels as prior labels; noise
    /// objects carry none. Holdout classes have the indicator role.
    pub store: FeatureStore,
    pub class_sizes: Vec<usize>,
    pub noise_count: usize,
}

impl SyntheticDataset {
    pub fn write(&self, features: &Path, labels: &Path) -> Result<()> {
        save_features(&self.store, features)?;
        self.store.save_labels(labels)
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let sizes = spec.class_sizes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let sigma = spec.cluster_sigma;
    let min_dist = spec.separation * sigma;
    // centers uniform in a cube wide enough that rejection sampling ends fast
    let half = (min_dist * (spec.class_count as f64).powf(1.0 / spec.dim as f64)).max(sigma);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.class_count);
    let mut attempts = 0usize;
    while centers.len() < spec.class_count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Value("cannot place class centers with the requested separation".into()));
        }
        let c: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(-half..=half)).collect();
        let far = centers.iter().all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= min_dist * min_dist);
        if far {
            centers.push(c);
        }
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Value(e.to_string()))?;
    let mut rows: Vec<(Vec<f32>, Option<usize>)> = Vec::with_capacity(spec.object_count);
    for (class, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            let v = centers[class].iter().map(|&x| (x + normal.sample(&mut rng)) as f32).collect();
            rows.push((v, Some(class)));
        }
    }
    let noise_count = spec.object_count - rows.len();
    let extent = half + 4.0 * sigma;
    for _ in 0..noise_count {
        rows.push(((0..spec.dim).map(|_| rng.random_range(-extent..=extent) as f32).collect(), None));
    }
    rows.shuffle(&mut rng);
    let width = spec.object_count.max(1).to_string().len();
    let records = rows.into_iter().enumerate().map(|(i, (v, class))| {
        let mut r = ObjectRecord::new(format!("obj-{i:0width$}"), v);
        if let Some(c) = class {
            r.prior_label = Some(SyntheticSpec::class_label(c));
            r.dataset_role =
                if spec.holdout_classes.contains(&c) { DatasetRole::Indicator } else { DatasetRole::Validation };
        }
        r
    });
    let store = FeatureStore::from_records(spec.dim, records)?;
    Ok(SyntheticDataset { store, class_sizes: sizes, noise_count })
}
