//! Named, deterministic random sub-streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a base
//! seed plus a label and an index, so the order in which work is scheduled
//! never changes the numbers drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Mix `base`, `label` and `index` into a new 64-bit seed.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(base: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, label, index))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Hex SHA-256 of a serializable value's canonical JSON.
pub fn digest_json<T: serde::Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize to JSON");
    hex::encode(Sha256::digest(&bytes))
}
