//! Shared input builders for the benchmarks.

use cmah_core::diffcore::Tensor;
use cmah_core::geometry::{Point, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect()
}

pub fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(points(rng, n)).unwrap()
}

pub fn codes(rng: &mut ChaCha8Rng, n: usize, bits: usize) -> Vec<Vec<i8>> {
    (0..n)
        .map(|_| (0..bits).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
        .collect()
}
