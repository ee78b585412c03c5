//! Seed derivation.
//!
//! Every random choice in the toolkit flows from one experiment seed. Each
//! component derives its own stream by hashing the seed together with a
//! component label, so adding or reordering consumers never shifts another
//! component's stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from `seed` and a component label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// A deterministic generator for the given seed and component label.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Generator for per-example work: the example index is XORed into the seed
/// so examples can be processed in any order (or in parallel) and still see
/// the same stream.
pub fn example_rng(seed: u64, label: &str, example_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed ^ example_index as u64, label))
}
