//! Deterministic per-stream seeds.
//!
//! Every random stream in a run (client selection, batch sampling, local
//! training) gets its own seed mixed from the master seed and the stream's
//! coordinates, so results never depend on how work is scheduled.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SplitMix64-style hash of `master` and `parts`.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix(master.wrapping_add(GOLDEN)), |acc, &p| mix(acc ^ p.wrapping_add(GOLDEN)))
}

/// Stream tags, so streams at the same coordinates stay independent.
pub(crate) mod tag {
    pub const SELECT: u64 = 1;
    pub const PLAN: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const INIT: u64 = 5;
    pub const DATA: u64 = 6;
    pub const EVAL: u64 = 7;
}
