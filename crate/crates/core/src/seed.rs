//! Seed derivation: every random stream comes from one top-level seed and a
//! purpose string.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// First 8 bytes (little-endian) of `sha256(seed_le || purpose)`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Generator behind every derived stream.
pub type SeededRng = ChaCha8Rng;

pub fn derive_rng(seed: u64, purpose: &str) -> SeededRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose))
}
