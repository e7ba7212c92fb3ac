//! Counter-style seed derivation. Every random decision in the system is a
//! pure function of (root seed, purpose tag, counters), so there is no mutable
//! RNG state to persist: a checkpoint only needs the root seed and the step
//! number to resume bit-identically.

/// SplitMix64 finalizer; good avalanche, stable forever.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed from a root seed and a purpose tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(tag.as_bytes()))
}

/// Derive with one counter (e.g. step).
pub fn derive1(seed: u64, tag: &str, a: u64) -> u64 {
    splitmix64(derive(seed, tag) ^ a)
}

/// Derive with two counters (e.g. step, sample index).
pub fn derive2(seed: u64, tag: &str, a: u64, b: u64) -> u64 {
    splitmix64(derive1(seed, tag, a) ^ splitmix64(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_and_counters_separate_streams() {
        assert_ne!(derive(1, "batch"), derive(1, "eval"));
        assert_ne!(derive(1, "batch"), derive(2, "batch"));
        assert_ne!(derive1(1, "batch", 0), derive1(1, "batch", 1));
        assert_ne!(derive2(1, "s", 0, 1), derive2(1, "s", 1, 0));
    }

    #[test]
    fn derivation_is_stable() {
        // Frozen values: changing them silently would break every seeded
        // artifact (checkpoints, logs) produced by earlier builds.
        assert_eq!(splitmix64(0), 0xe220a8397b1dcdaf);
        assert_eq!(fnv1a64(b"batch"), 0x99954e824b0d0e3b);
        assert_eq!(derive(42, "batch"), derive(42, "batch"));
    }
}
