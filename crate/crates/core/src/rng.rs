//! Seeding scheme.
//!
//! Every random stream is a `ChaCha8Rng` seeded from a 64-bit value. Sub-seeds
//! are derived from the run seed by folding stream labels through SplitMix64:
//! `s = mix(seed); for tag in path { s = mix(s ^ mix(tag)) }`. Derivation
//! depends only on the label path, so results do not change with the worker
//! count or the order in which tasks complete.
//!
//! Gaussian draws use `rand_distr::StandardNormal` (ziggurat) on top of that
//! stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |s, &tag| splitmix64(s ^ splitmix64(tag)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
