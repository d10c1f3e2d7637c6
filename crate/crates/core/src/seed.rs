//! Seed derivation: every random draw in the toolkit comes from a ChaCha8
//! stream keyed by a base seed and a textual scope.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stable 64-bit seed for `(base, scope)`.
pub fn derive_seed(base: u64, scope: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(scope.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scoped_rng(base: u64, scope: &str) -> ChaCha8Rng {
    rng(derive_seed(base, scope))
}
