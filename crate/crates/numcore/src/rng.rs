//! Seeded RNG helpers. Every random draw in the pipeline flows through a
//! ChaCha8 stream keyed by an explicit seed so runs are reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a sub-seed for a named purpose (FNV-1a over the label, mixed with
/// the parent seed). Stable across platforms.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}
