//! Benchmark inputs shared by the bench targets.

use crackcnn::{Rng, Tensor};

/// Uniform `[0, 1)` tensor from a fixed seed.
pub fn input(dims: &[usize]) -> Tensor {
    Rng::new(7).uniform(0.0, 1.0, dims).expect("valid dims")
}

/// Alternating class labels.
pub fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}
