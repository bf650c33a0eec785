//! Seeded RNG streams.
//!
//! Every random decision in the crate draws from a stream derived from a user
//! seed plus a fixed label and position, so results do not depend on thread
//! count or iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels. Each consumer gets its own label so streams never collide.
pub mod label {
    pub const MODEL_INIT: u64 = 0x01;
    pub const SPLIT_USER: u64 = 0x02;
    pub const SPLIT_TEMPORAL: u64 = 0x03;
    pub const EPOCH_SHUFFLE: u64 = 0x04;
    pub const EXAMPLE: u64 = 0x05;
    pub const SIM_TRIAL: u64 = 0x06;
    pub const VERIFY_TRIAL: u64 = 0x07;
    pub const SYNTH: u64 = 0x08;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a ChaCha8 stream from a seed and a path of stream coordinates
/// (label, epoch, example index, ...).
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &part in path {
        state = splitmix64(state ^ part.wrapping_mul(0xff51_afd7_ed55_8ccd));
    }
    ChaCha8Rng::seed_from_u64(state)
}
