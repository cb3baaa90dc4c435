//! Fixtures shared by the benchmarks.

use projektor_core::dataspace::Dataset;
use projektor_core::rng;
use rand_distr::{Distribution, Normal};

/// `n` labeled points from `classes` unit Gaussians spaced along a circle.
pub fn blobs(id: &str, n: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = rng::seeded(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let angle = c as f64 * std::f64::consts::TAU / classes as f64;
        features.push(3.0 * angle.cos() + noise.sample(&mut r));
        features.push(3.0 * angle.sin() + noise.sample(&mut r));
        labels.push(c);
    }
    Dataset::new(id, 2, features, Some(labels)).unwrap()
}
