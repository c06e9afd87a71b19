//! Fixtures shared by the benchmarks.

use pr2r_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[0, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("shape matches data")
}

/// `n` random images at the benchmark resolution.
pub fn random_images(n: usize, seed: u64) -> Tensor {
    random_tensor(&[n, 3, 32, 16], seed)
}

/// `ids` identities with `per_id` consecutive images each.
pub fn pk_labels(ids: usize, per_id: usize) -> Vec<usize> {
    (0..ids * per_id).map(|i| i / per_id).collect()
}
