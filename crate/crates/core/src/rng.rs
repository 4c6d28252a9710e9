//! Seeded random streams.
//!
//! Every random quantity is drawn from a ChaCha8 generator keyed by the
//! root seed and a fixed stream id, so independent consumers never share
//! state and results do not depend on call order between them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_BACKBONE: u64 = 1;
pub const STREAM_MASKS: u64 = 2;
pub const STREAM_PROTOTYPES: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;
pub const STREAM_TRAIN_AUGMENT: u64 = 5;
pub const STREAM_PUSH: u64 = 6;
pub const STREAM_DATASET: u64 = 7;
pub const STREAM_EVAL: u64 = 8;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes several integers into one seed (splitmix64 finalizer per word).
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
