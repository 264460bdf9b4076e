//! Deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(master, stream, index)`. Streams separate independent
/// uses of the same master seed (dataset episodes, evaluation episodes, ...).
pub fn derive(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream as u64)) ^ index)
}

pub fn rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    DatasetEpisode = 1,
    TaskLayout = 2,
    ExpertNoise = 3,
    ParamInit = 4,
    Warmstart = 5,
    Belief = 6,
    Policy = 7,
    EvalEpisode = 8,
    Sampler = 9,
    Perturbation = 10,
    Analysis = 11,
    Augment = 12,
}
