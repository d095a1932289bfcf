//! Seed derivation and the RNG streams used across the crate.
//!
//! Every stochastic component (weight init, dropout, jitter, batch order,
//! scene generation) draws from its own stream derived from a master seed
//! and a stable tag, so adding draws to one component never perturbs the
//! others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The RNG used everywhere. ChaCha12 is seedable, portable, and its full
/// state can be captured for bit-exact checkpoint resume.
pub type Rng = ChaCha12Rng;

/// SplitMix64 finalizer; mixes seed and tag into an independent stream seed.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a stream tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = master;
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h)
}

/// A fresh RNG stream for `tag` under `master`.
pub fn stream(master: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tag))
}

/// Snapshot of an RNG's full state, for checkpointing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn capture(rng: &Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore(state: &RngState) -> Rng {
    let mut rng = Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}
