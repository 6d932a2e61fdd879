//! Seed derivation and small shared helpers.

/// SplitMix64 finalizer: a cheap, well-mixed 64-bit hash.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-item sub-seed from a master seed and an index, so
/// parallel workers never share or race an RNG stream.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_are_stable_and_distinct() {
        let a = sub_seed(7, 0);
        assert_eq!(a, sub_seed(7, 0));
        let mut seen = std::collections::HashSet::new();
        for i in 0..1000 {
            assert!(seen.insert(sub_seed(7, i)), "collision at index {i}");
        }
        assert_ne!(sub_seed(7, 3), sub_seed(8, 3));
    }
}
