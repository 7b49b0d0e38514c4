//! FNV-1a 64-bit hashing, used for the stable tokenizer, parameter
//! checksums and per-parameter seed derivation.

pub const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a_bytes(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

pub fn fnv1a_u64(state: u64, value: u64) -> u64 {
    fnv1a_bytes(state, &value.to_le_bytes())
}

pub fn hash_str(s: &str) -> u64 {
    fnv1a_bytes(FNV_OFFSET, s.as_bytes())
}

/// SplitMix64 finalizer; spreads low-entropy seeds over the full range.
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vector() {
        // Standard FNV-1a test vector: "a" -> 0xaf63dc4c8601ec8c
        assert_eq!(hash_str("a"), 0xaf63dc4c8601ec8c);
        assert_eq!(hash_str(""), FNV_OFFSET);
    }

    #[test]
    fn mix_separates_consecutive_seeds() {
        assert_ne!(mix(1) & 0xffff, mix(2) & 0xffff);
    }
}
