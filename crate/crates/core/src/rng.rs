//! Seeded random number generation shared by every stochastic component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// A generator seeded from `seed` and a stream tag, so that independent
/// consumers of one user seed never share a stream.
pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod streams {
    pub const NOISE: u64 = 1;
    pub const MASK: u64 = 2;
    pub const RECURRENT: u64 = 3;
    pub const INPUT: u64 = 4;
    pub const THETA: u64 = 5;
    pub const READOUT: u64 = 6;
    pub const ERNN: u64 = 7;
    pub const ESN_FEEDBACK: u64 = 8;
    pub const ESN_STATE_NOISE: u64 = 9;
    pub const GA: u64 = 10;
}
