//! Criterion benchmarks for the hot kernels; see `benches/`.

use dkp_core::Tensor;

/// Deterministic, non-constant test data of the given shape.
pub fn wave(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.37 + phase).sin()).collect()).unwrap()
}
