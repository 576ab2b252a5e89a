//! Shared fixtures for the criterion benches.

use fmpa_core::vecmath::ParamVector;
use fmpa_core::Dataset;

/// `n` deterministic pseudo-random updates of dimension `d`.
pub fn updates(n: usize, d: usize, seed: u64) -> Vec<ParamVector> {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    (0..n)
        .map(|_| ParamVector::new((0..d).map(|_| next()).collect()).expect("finite"))
        .collect()
}

/// Small synthetic training set for local-training benches.
pub fn blobs(classes: usize, per_class: usize, dim: usize) -> Dataset {
    fmpa_core::data::synth_blobs(classes, per_class, dim, 0.15, 1).expect("valid blob config").0
}
