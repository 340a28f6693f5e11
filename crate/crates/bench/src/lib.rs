//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scg_breath::{LabelClass, SignalRecord, SynthConfig};

/// A 40 s NB record at 1 kHz.
pub fn record() -> SignalRecord {
    scg_breath::synth::generate(&SynthConfig::for_class(LabelClass::NB, 1)).expect("default config is valid")
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}
