//! Keyed random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed plus a purpose tag and up to three integer keys, so draws never
//! depend on the order in which other components consumed randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Perturbation = 1,
    ParamInit = 2,
    Sampler = 3,
    Render = 4,
    Latent = 5,
    Style = 6,
    Pattern = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, purpose, a, b, c)`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> Stream {
    let mut h = splitmix(seed);
    for k in [purpose as u64, a, b, c] {
        h = splitmix(h ^ k);
    }
    ChaCha8Rng::seed_from_u64(h)
}
