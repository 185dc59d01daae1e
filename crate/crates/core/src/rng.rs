//! Seed derivation. Every random stream is keyed by an explicit seed so that
//! results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of stream identifiers.
pub fn derive_seed(base: u64, streams: &[u64]) -> u64 {
    streams
        .iter()
        .fold(splitmix64(base), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn rng_for(base: u64, streams: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, streams))
}
