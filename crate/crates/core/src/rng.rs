//! Seeded, reproducible random streams.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numcore::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream keyed by `(seed, stream)`, e.g. a particle or partition index.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// `rows × cols` tensor of independent standard normals.
pub fn normal_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// `rows × cols` tensor of independent ±1 entries.
pub fn rademacher_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Random subset of `0..n` of size `k` (with replacement when `k > n`).
pub fn batch_indices(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        let mut idx: Vec<usize> = (0..n).collect();
        shuffle(rng, &mut idx);
        return idx;
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

pub fn shuffle<T>(rng: &mut Rng, v: &mut [T]) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}
