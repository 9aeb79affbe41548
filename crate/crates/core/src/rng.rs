//! Counter-derived random streams.
//!
//! Every random draw in a run comes from a stream keyed by the master seed and
//! a tuple of counters (step, query, rollout index, ...). The key is folded
//! through SplitMix64 into a 64-bit seed for a ChaCha8 generator, so results do
//! not depend on the order in which parallel workers are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint even when their
/// numeric counters coincide.
pub mod domain {
    pub const ROLLOUT: u64 = 0x524f_4c4c;
    pub const RUN: u64 = 0x5255_4e00;
    pub const THEOREM: u64 = 0x5448_4d00;
    pub const GRADCHECK: u64 = 0x4744_4300;
    pub const QUERIES: u64 = 0x5155_4552;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `keys` into `master`, one SplitMix64 round per key.
pub fn stream_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(master: u64, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(master, keys))
}
