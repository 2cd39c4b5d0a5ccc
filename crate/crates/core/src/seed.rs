//! Deterministic seed derivation.
//!
//! Every stochastic component takes a master seed plus a stable stream
//! tag, so reruns with the same configuration reproduce bit-identical
//! results regardless of call order elsewhere.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over an arbitrary byte string.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derives a child seed from a master seed, a stream tag, and an index.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = fnv1a(tag.as_bytes());
    for b in master.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    for b in index.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Content fingerprint of an `f32` slice (exact bit patterns).
pub fn fingerprint_f32(values: &[f32]) -> u64 {
    let mut h = FNV_OFFSET;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_tag_sensitive() {
        assert_eq!(derive(42, "fold", 1), derive(42, "fold", 1));
        assert_ne!(derive(42, "fold", 1), derive(42, "fold", 2));
        assert_ne!(derive(42, "fold", 1), derive(42, "epoch", 1));
        assert_ne!(derive(42, "fold", 1), derive(43, "fold", 1));
    }
}
