//! Counter-style seed derivation. Every random stream in the crate is
//! keyed by a master seed plus a tuple of integer tags, so draws never
//! depend on iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags; distinct per use site.
pub mod tag {
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const BACKGROUND: u64 = 0x4247_4e44;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const VIEWS: u64 = 0x5649_4557;
    pub const INIT: u64 = 0x494e_4954;
    pub const REFERENCE: u64 = 0x5245_4645;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a master seed with tags into a new 64-bit seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}
