//! Named random sub-streams derived from a single run seed.
//!
//! Each consumer draws from its own ChaCha stream so that changing how much
//! randomness one component uses never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Weights = 1,
    DataOrder = 2,
    RandomK = 3,
    GradRounding = 4,
    SyntheticData = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
