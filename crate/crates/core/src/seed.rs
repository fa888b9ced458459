//! Seed derivation.
//!
//! Every random choice in the harness descends from one 64-bit run seed.
//! Sub-seeds are the first eight bytes of `SHA-256(seed_le || scope)`, so
//! they are stable across platforms and releases, and each stage (or each
//! task, label, instance) gets its own independent stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(seed: u64, scope: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(scope.as_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

pub fn rng_for(seed: u64, scope: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, scope))
}
