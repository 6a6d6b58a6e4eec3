use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream for `(seed, tag, index)`. Used wherever work
/// is split across threads so the random draws do not depend on scheduling.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

pub mod tags {
    pub const GENERATOR_SETUP: u64 = 1;
    pub const GENERATOR_TREE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const GENERATE: u64 = 7;
    pub const KMEANS: u64 = 8;
}
