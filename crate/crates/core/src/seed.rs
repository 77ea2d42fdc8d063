//! Sub-seed derivation: every random stream descends from one root seed.

use sha2::{Digest, Sha256};

/// Stable 64-bit seed for the stream named `label` under `root`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
