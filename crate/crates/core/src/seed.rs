//! Seed derivation so every random draw depends only on its own coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Mixes a base seed with a tag and integer coordinates.
pub fn derive_seed(base: u64, tag: &str, coords: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_for(base: u64, tag: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, coords))
}
