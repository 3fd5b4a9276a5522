//! Shared fixtures for the criterion benchmarks.

use lpm_core::synth::{self, SyntheticData};

/// The three-plus-two component preset at a fixed seed.
pub fn lovo_fixture(seed: u64) -> SyntheticData {
    synth::generate(&synth::lovo_like(seed)).expect("preset is valid")
}
