//! Named random sub-streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Asset,
    Prior,
    Params,
    Noise,
    Init,
    Em,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Asset => 1,
            Stream::Prior => 2,
            Stream::Params => 3,
            Stream::Noise => 4,
            Stream::Init => 5,
            Stream::Em => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
