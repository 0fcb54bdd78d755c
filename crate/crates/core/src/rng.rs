//! Seed substreams.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream whose
//! seed is derived from the master seed and a path of integer tags
//! (direction index, replicate index, block index, ...). Results therefore
//! do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tags separating the independent uses of a master seed.
pub mod tag {
    pub const NULL_SIM: u64 = 0x4e55_4c4c;
    pub const ZC_MC: u64 = 0x5a43_4d43;
    pub const ZC_BT: u64 = 0x5a43_4254;
    pub const GENERATE: u64 = 0x4745_4e45;
    pub const REPLICATE: u64 = 0x5245_504c;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a sequence of tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn substream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}
