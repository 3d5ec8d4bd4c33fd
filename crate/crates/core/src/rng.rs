//! Counter-keyed random streams.
//!
//! Every stochastic decision draws from a generator keyed by a tuple such as
//! `(seed, epoch, scene)`, so reordering work never changes its outcome and
//! the whole random state of a run is just its seed plus the step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep keys for different purposes apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Scene = 1,
    Mask = 2,
    Shuffle = 3,
    Init = 4,
    Probe = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix_key(stream: Stream, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(stream as u64), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn keyed_rng(stream: Stream, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_key(stream, parts))
}
