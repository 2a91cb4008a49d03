//! Seed derivation helpers.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a base seed
//! mixed with a stream tag and an index, so results never depend on iteration
//! or scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut h = mix64(base);
    for b in stream.bytes() {
        h = mix64(h ^ b as u64);
    }
    mix64(h ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(base: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}
