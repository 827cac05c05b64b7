//! Input fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakpoint_core::cloudstore::{Point3, PointCloud};

pub fn random_points(n: usize, extent: f64, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..extent))).collect()
}

pub fn random_cloud(n: usize, extent: f64, classes: i32, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let colors = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..1.0))).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    PointCloud::new(random_points(n, extent, seed), colors, Some(labels)).expect("finite points")
}

pub fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
