//! Benchmark fixtures.

use roimt_core::datamodel::generate_synthetic;
use roimt_core::{Dataset, SynthConfig};

/// Small synthetic dataset, all slices labeled.
pub fn fixture(image_size: usize, n_stacks: usize) -> Dataset {
    generate_synthetic(&SynthConfig {
        n_stacks,
        slices_per_stack: 30,
        image_size,
        ..SynthConfig::default()
    })
    .expect("valid fixture config")
}
