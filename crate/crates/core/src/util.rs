//! Small shared utilities: stable hashing and seed derivation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// FNV-1a 64-bit hash. Stable across platforms and compiler versions, unlike
/// `std::hash::DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a base seed and a label.
///
/// All stage-level randomness flows from one top-level seed expanded through
/// this fixed derivation, so individual stages stay independently
/// reproducible.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + label.len());
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    fnv1a64(&bytes)
}

/// Seeded RNG for a named stream.
pub fn seeded_rng(base: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, label))
}

/// Hex-encoded SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, "world"), derive_seed(7, "world"));
        assert_ne!(derive_seed(7, "world"), derive_seed(7, "pretrain"));
        assert_ne!(derive_seed(7, "world"), derive_seed(8, "world"));
    }

    #[test]
    fn sha256_hex_known_value() {
        // sha256("") is a fixed constant.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
