//! Named random sub-streams derived from a single experiment seed.
//!
//! Every consumer of randomness asks for its own stream keyed by a purpose tag
//! and integer indices (edge endpoints, rollout index), so results never depend
//! on the order in which workers happen to run.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Sampling = 1,
    Motion = 2,
    MonteCarlo = 3,
    Simulate = 4,
    Verify = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, indices: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, indices))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Draw from `N(mean, cov)`; `factor` must satisfy `factor·factorᵀ = cov`.
pub fn gaussian<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
) -> DVector<f64> {
    mean + factor * standard_normal(rng, factor.ncols())
}
