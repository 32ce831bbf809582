//! Shared helpers for the criterion micro-benchmarks.

use num_complex::Complex32;
use segdev::{Environment, SegVector, SplitPolicy};

/// The benchmark payload shape: complex square single-precision matrices.
pub const MATRICES: usize = 12;

pub fn environment(devices: usize) -> Environment {
    Environment::create(devices, None).expect("environment")
}

pub fn payload(side: usize) -> Vec<Complex32> {
    (0..MATRICES * side * side)
        .map(|i| Complex32::new((i % 127) as f32 * 0.01, (i % 113) as f32 * -0.01))
        .collect()
}

pub fn matrix_container(
    env: &Environment,
    side: usize,
) -> SegVector<Complex32> {
    SegVector::new(env, MATRICES * side * side, SplitPolicy::Blockwise { block_len: side * side })
        .expect("container")
}
