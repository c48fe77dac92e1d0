//! Seeded random streams.
//!
//! Every random quantity in the crate comes from ChaCha8 (the `rand_chacha`
//! implementation) seeded through `SeedableRng::seed_from_u64`, which expands
//! the 64-bit seed with PCG32. Normal deviates use `rand_distr`'s ziggurat
//! `StandardNormal`. Fixing these pins streams across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose under one user seed.
pub fn substream(seed: u64, stream: u64) -> SeededRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[inline]
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}
