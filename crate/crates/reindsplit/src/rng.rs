//! Deterministic RNG streams.
//!
//! Every random draw in the simulator comes from a stream derived as a hash
//! of the run seed plus a scope tag and indices (device, episode, step).
//! Streams are independent of scheduling order, so concurrent device
//! execution cannot change results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scope tags for derived streams. The numeric values are part of the
/// determinism contract; reordering them changes every downstream draw.
pub mod scope {
    pub const DATA: u64 = 1;
    pub const SPLIT_TAGS: u64 = 2;
    pub const SHARD: u64 = 3;
    pub const NET_INIT: u64 = 4;
    pub const QNET_INIT: u64 = 5;
    pub const REPLAY: u64 = 6;
    pub const DEVICE_INIT: u64 = 7;
    pub const DEVICE_STEP: u64 = 8;
    pub const ACTION: u64 = 9;
    pub const BATCH: u64 = 10;
    pub const VAL_SAMPLE: u64 = 11;
    pub const BASELINE: u64 = 12;
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed and tag path into a single 64-bit stream identifier.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0xD6E8_FEB8_6659_FD93);
    for &tag in tags {
        state = splitmix64(state ^ splitmix64(tag));
    }
    state
}

/// Deterministic generator for the given seed and tag path.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = derive_seed(seed, tags);
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
