//! Seeded random streams.
//!
//! Every stage of a run draws from its own ChaCha stream derived from the
//! run seed and a stage name, so adding draws to one stage never shifts the
//! numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// FNV-1a, used to turn a stage name into a stream id.
fn stream_id(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

pub fn substream(seed: u64, name: &str) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

/// Stream for the `index`-th repetition of a named stage.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream_id(name).wrapping_add(index));
    rng
}
