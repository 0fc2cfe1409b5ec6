//! Shared fixtures for the kernel benchmarks.

use spq_core::{CodebookSet, Rng, Tensor};

/// Gaussian `[rows, cols]` tensor from a fixed stream.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, 0);
    let data = (0..rows * cols).map(|_| rng.normal(0.0, 0.5)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

pub fn codebooks(m: usize, k: usize, subdim: usize, seed: u64) -> CodebookSet {
    CodebookSet::random(m, k, subdim, &mut Rng::new(seed, 1)).expect("valid codebook shape")
}
