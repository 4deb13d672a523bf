//! Seed derivation. Every random stream in the crate comes from a
//! `ChaCha8Rng` whose seed is a stable hash of the master seed and a path of
//! integer labels, so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of `base` followed by `labels`.
pub fn derive(base: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(base), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

// Stream labels, kept distinct so no two consumers share a stream.
pub(crate) const STREAM_BATCHES: u64 = 0xB47C;
pub(crate) const STREAM_COEFFS: u64 = 0xC0EF;
pub(crate) const STREAM_INIT: u64 = 0x1417;
pub(crate) const STREAM_WARMUP: u64 = 0x3A2A;
pub(crate) const STREAM_DATA: u64 = 0xDA7A;
pub(crate) const STREAM_PROXY: u64 = 0x9A0C;
pub(crate) const STREAM_PARTITION: u64 = 0x9A27;
pub(crate) const STREAM_SPLIT: u64 = 0x5917;
pub(crate) const STREAM_ROUND: u64 = 0x2047;

/// Seed shared by every client in `round`.
pub fn round_seed(master_seed: u64, round: usize) -> u64 {
    derive(master_seed, &[STREAM_ROUND, round as u64])
}

/// Seed handed to client `client_id` for a round.
pub fn client_seed(round_seed: u64, client_id: usize) -> u64 {
    derive(round_seed, &[client_id as u64])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_sensitive() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
        assert_ne!(client_seed(round_seed(1, 0), 1), client_seed(round_seed(1, 1), 0));
    }
}
