//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a root seed mixed with a small tuple of stream coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SlpRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with stream coordinates into a new seed.
pub fn derive_seed(root: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(root), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(root: u64, coords: &[u64]) -> SlpRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, coords))
}

/// Stable 64-bit hash of a string (FNV-1a), for seeding per-symbol streams.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
