//! Seed derivation and substreams for reproducible synthesis.
//!
//! Every randomized stage draws from a ChaCha stream seeded through a stable
//! mixing function, so results are identical across platforms, rustc versions,
//! and iteration order. Per-entity substreams (one per image, one per sample)
//! make parallel output equal to serial output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; stable by construction, unlike `DefaultHasher`.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a seed with stream labels into a derived seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    let mut acc = mix(seed);
    for &l in labels {
        acc = mix(acc ^ l);
    }
    acc
}

/// RNG for a derived substream.
pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}
