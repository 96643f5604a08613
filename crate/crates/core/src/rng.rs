//! Splittable, counter-based random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream keyed by a
//! 64-bit seed derived from a master seed and a path of integers (replicate,
//! fold, entity, ...). Derivation is a pure function, so results never depend
//! on the order in which workers pick up tasks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Entity tags used as the last path element when deriving data streams.
pub mod entity {
    pub const U: u64 = 0x5500;
    pub const Z: u64 = 0x5a00;
    pub const EPSILON: u64 = 0xe900;
    pub const SKETCH: u64 = 0x5c00;
    pub const FOLDS: u64 = 0xf000;
    pub const TEST: u64 = 0x7e00;
    pub const REPLICATE: u64 = 0x4e00;
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and `path`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = master;
    let mut acc = splitmix64(&mut state);
    for &p in path {
        let mut s = acc ^ p.wrapping_mul(0xd6e8_feb8_6659_fd93);
        acc = splitmix64(&mut s);
    }
    acc
}

/// Opens the ChaCha stream keyed by `seed`.
pub fn stream(seed: u64) -> Stream {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Shorthand for `stream(derive_seed(master, path))`.
pub fn substream(master: u64, path: &[u64]) -> Stream {
    stream(derive_seed(master, path))
}
