//! Deterministic RNG stream derivation. Every consumer asks for a stream by
//! a path of integers so that adding a consumer never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of stream indices into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(seed);
    for &p in path {
        s = splitmix64(s ^ splitmix64(p.wrapping_add(0xA5A5_A5A5)));
    }
    s
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
