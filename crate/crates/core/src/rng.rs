//! Deterministic random streams.
//!
//! Every stochastic loop draws from a Xoshiro256++ stream whose state is
//! derived by hashing `(seed, purpose, index)`, where the index is a
//! particle number or a bit-block number. Any item can therefore be
//! regenerated on its own, independently of scheduling.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

/// What a stream is used for; keeps the pilot and evaluation streams of
/// one seed disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Walk = 0x7761_6c6b,
    PilotBits = 0x7069_6c62,
    PilotArrivals = 0x7069_6c61,
    EvalBits = 0x6576_6c62,
    EvalArrivals = 0x6576_6c61,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let key = mix64(seed ^ mix64(purpose as u64));
    let mut state = [0u8; 32];
    for (j, word) in state.chunks_exact_mut(8).enumerate() {
        let w = mix64(key ^ mix64(index.wrapping_add((j as u64) << 56)));
        word.copy_from_slice(&w.to_le_bytes());
    }
    if state == [0u8; 32] {
        state[0] = 1;
    }
    StreamRng::from_seed(state)
}
