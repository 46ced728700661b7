//! Shared inputs for the benchmarks.

use tgcl_core::synth::{synth_dataset, SynthConfig};
use tgcl_core::{Dataset, PreprocessOptions};

/// A small synthetic dataset built through the regular ingest path.
pub fn synthetic_dataset(classes: usize, flows_per_class: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        classes,
        flows_per_class,
        seed,
        ..SynthConfig::default()
    };
    synth_dataset(&cfg, &PreprocessOptions::default())
        .expect("synthetic data preprocesses")
        .0
}
