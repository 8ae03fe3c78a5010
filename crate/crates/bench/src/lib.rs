//! Shared fixtures for the criterion benchmarks.

use bpar_core::data::{generate_synthetic_series, split_dataset, window, SplitDataset, WindowSpec};
use bpar_core::seed::SeedRecipe;
use bpar_core::variational::{Activation, Architecture, BayesianModel, WeightMode};

pub fn bench_data(length: usize) -> SplitDataset {
    let series = generate_synthetic_series(length, &[(1.0, 96.0, 0.0), (0.4, 24.0, 1.0)], 0.05, 1);
    let ds = window(&series, &WindowSpec::default()).unwrap();
    split_dataset(&ds, 0.1).unwrap()
}

pub fn bench_model(width: usize, seed: u64) -> BayesianModel {
    BayesianModel::build(
        &Architecture {
            input_dim: 96,
            hidden: vec![width, width],
            output_dim: 24,
            activation: Activation::Relu,
            weight_mode: WeightMode::Variational,
            dropout_p: None,
            sigma_scale: 1.0,
        },
        &SeedRecipe::new(seed),
    )
}
