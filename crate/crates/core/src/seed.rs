//! Deterministic seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere a stream must be reproducible across platforms.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a list of integers into a single seed. Order matters.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(parts: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_order_sensitive() {
        assert_eq!(derive(&[1, 2, 3]), derive(&[1, 2, 3]));
        assert_ne!(derive(&[1, 2, 3]), derive(&[3, 2, 1]));
        assert_ne!(derive(&[0]), derive(&[0, 0]));
    }
}
