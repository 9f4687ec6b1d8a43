use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent child seed for `stream` (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|k| derive_seed(13, k)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(derive_seed(5, 2), derive_seed(5, 2));
    }
}
