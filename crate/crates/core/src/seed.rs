// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stable per-component seed derivation.

use sha2::{Digest, Sha256};

/// Derives a component seed from a root seed and a component name. Stable
/// across platforms and releases (SHA-256 of `root_le || name`).
pub fn derive_seed(root: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
