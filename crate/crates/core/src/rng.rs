//! Deterministic RNG stream derivation.
//!
//! Every random choice in the crate draws from a ChaCha stream derived from a
//! master seed, a purpose tag, and an index. Parallel workers (one per client,
//! one per trial) therefore produce identical results regardless of execution
//! order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the splitmix64 sequence. Used as the seed mixer.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, tag, index)` by absorbing the tag bytes
/// and the index into a splitmix64 chain.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut state = master;
    let mut out = splitmix64(&mut state);
    for chunk in tag.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        state ^= u64::from_le_bytes(word);
        out = splitmix64(&mut state);
    }
    state ^= index;
    out ^= splitmix64(&mut state);
    out
}

/// A seeded ChaCha stream for the given purpose.
pub fn stream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}
