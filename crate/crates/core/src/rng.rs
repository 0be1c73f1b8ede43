//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`Rng`], which is
//! xoshiro256** seeded through SplitMix64 (`rand_xoshiro::Xoshiro256StarStar::seed_from_u64`).
//! Both algorithms are fully specified by their constants and produce the
//! same stream on every platform.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// SplitMix64 output function.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Seed for a learner's data ordering in a given round.
///
/// Each input is absorbed in turn: `h = mix64(h ^ (x + k·γ))` starting from
/// `h = mix64(global_seed)`, where `γ` is the SplitMix64 increment and `k`
/// the position of the input. Round 0 is the calibration round.
pub fn hash_seed(global_seed: u64, round: u32, learner_index: u16) -> u64 {
    let mut h = mix64(global_seed);
    h = mix64(h ^ u64::from(round).wrapping_add(GOLDEN_GAMMA));
    mix64(h ^ u64::from(learner_index).wrapping_add(GOLDEN_GAMMA.wrapping_mul(2)))
}
