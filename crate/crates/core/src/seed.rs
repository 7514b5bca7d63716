//! Stable seed derivation.
//!
//! Every random draw in the crate is keyed by a seed derived from the master
//! seed plus whatever identifies the draw (step, prompt, sample index), so
//! results do not depend on thread count or iteration order.

use sha2::{Digest, Sha256};

/// Hashes a list of integer keys into a 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    first_u64(&h.finalize())
}

/// Stable 64-bit hash of a string, for use as a seed component.
pub fn hash_str(s: &str) -> u64 {
    first_u64(&Sha256::digest(s.as_bytes()))
}

fn first_u64(digest: &[u8]) -> u64 {
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}
