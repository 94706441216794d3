//! Shared fixtures for the benchmarks.

use hvcomp::data::{views_for, DataItem, ShapeSpec, ViewMode};
use hvcomp::pointcloud::{Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A sphere item with its partial view and queries.
pub fn sphere_item(seed: u64) -> DataItem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(item) = views_for(ShapeSpec::sphere([0.0; 3], 0.35), ViewMode::Bottom, &mut rng).unwrap() {
            return item;
        }
    }
}

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Point3> = (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-0.5..0.5))).collect();
    PointCloud::from_positions(pts).unwrap()
}
