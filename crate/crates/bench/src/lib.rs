//! Shared fixtures for the benchmark targets.

use splitsim_core::dataset::SyntheticSpec;
use splitsim_core::LabeledDataset;

pub fn bench_dataset() -> LabeledDataset {
    SyntheticSpec {
        classes: 10,
        per_class_count: 1000,
        feature_dim: 32,
        class_separation: 1.0,
        noise_sigma: 1.0,
        seed: 99,
    }
    .generate()
    .unwrap()
}

/// Uneven client sizes summing to 50_000.
pub fn bench_sizes(clients: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = (0..clients).map(|k| 1 + (k * 97 % 1500)).collect();
    let total: usize = sizes.iter().sum();
    sizes[0] += 50_000usize.saturating_sub(total);
    sizes
}
