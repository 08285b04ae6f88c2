//! Shared fixtures for the benchmarks.

use fliq_core::datagen::{build_dataset, synthetic_digits, DatasetSpec, FliDataset, TimeGrid};

/// A small deterministic dataset with `n_gates` gates.
pub fn fixture(n_gates: usize, records: usize) -> FliDataset {
    let spec = DatasetSpec::new(TimeGrid::new(n_gates, 10.0).expect("valid grid"), 7);
    build_dataset(&synthetic_digits(4, 7), &spec).expect("dataset").head(records)
}
