//! Deterministic seed derivation for every random stream in the pipeline.
//!
//! All randomness is rooted in a single shared 64-bit base seed. Each consumer
//! derives its own stream seed as
//!
//! ```text
//! seed' = fold(base_seed, [domain_tag, part_0, part_1, ...])
//! ```
//!
//! where `fold` applies one SplitMix64 scramble per component. Two parties
//! that agree on the base seed and the components derive bit-identical
//! streams, which is what makes the shared per-round Hadamard diagonal and the
//! per-(worker, round, chunk) quantization coins reproducible across
//! implementations.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Domain tag for the round-indexed Rademacher diagonal.
pub const TAG_RHT_DIAG: u64 = 0x5248_545f_4449_4147; // "RHT_DIAG"
/// Domain tag for stochastic-quantization coins.
pub const TAG_SQ: u64 = 0x5351_5f43_4f49_4e53; // "SQ_COINS"
/// Domain tag for simulated-network loss draws.
pub const TAG_NET: u64 = 0x4e45_545f_4c4f_5353; // "NET_LOSS"
/// Domain tag for straggler selection.
pub const TAG_STRAGGLER: u64 = 0x5354_5241_4747_4c52; // "STRAGGLR"
/// Domain tag for synthetic gradient draws.
pub const TAG_GRADIENT: u64 = 0x4752_4144_4945_4e54; // "GRADIENT"

/// One SplitMix64 step: advance by the golden-ratio increment and scramble.
#[inline]
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stream seed from the base seed and an ordered component list.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &part in parts {
        state = splitmix64(state ^ part);
    }
    state
}

/// Counter-based stream for the derived seed. ChaCha is seekable, so draw `j`
/// is addressable independently of draws `0..j`.
pub fn stream(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
