//! Fixtures shared by the benchmarks.

use kmeta_core::{Hyper, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Default-sized model on `m`-dimensional measurements.
pub fn default_model(m: usize, representation: bool) -> ModelParams {
    let mut hyper = Hyper::new(m);
    hyper.use_representation = representation;
    ModelParams::init(hyper, 0).expect("valid hyper")
}
