//! Deterministic derivation of independent RNG streams from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a 32-byte ChaCha seed from the master seed, a domain label and
/// a list of indices (participant id, round, ...).
pub fn derive_seed(master: u64, label: &str, indices: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"fedshare/v1");
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}

pub fn stream(master: u64, label: &str, indices: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(master, label, indices))
}
