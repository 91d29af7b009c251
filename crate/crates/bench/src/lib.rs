//! Shared fixtures for the benchmarks.

use hallucinet::data::{generate_synthetic, SyntheticParams};
use hallucinet::pipeline::{prepare, DistillationConfig, PreparedData};
use hallucinet::{RngState, Tensor};

/// Uniform values in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngState::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("shape matches data")
}

/// The default synthetic task, split and normalized.
pub fn synthetic_task(n_per_class: usize, config: &DistillationConfig) -> PreparedData {
    let params = SyntheticParams {
        n_per_class,
        ..SyntheticParams::default()
    };
    let data = generate_synthetic(&params, &mut RngState::derive(config.seed, "data")).expect("valid params");
    prepare(data, config).expect("valid config")
}
