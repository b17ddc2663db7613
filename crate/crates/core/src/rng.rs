//! Named random sub-streams derived from one run seed.
//!
//! Every consumer of randomness asks for its own stream so that, for example,
//! changing the number of mini-batches does not perturb model initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Relevance-parameter initialization.
    Init,
    /// Exposure-parameter initialization.
    ExposureInit,
    /// Mini-batch shuffling and validation batch draws.
    Sampling,
    /// Semi-synthetic Bernoulli draws.
    Synthesis,
    /// Hyper-validation and test split sampling.
    Split,
    /// Monte Carlo studies.
    MonteCarlo,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::ExposureInit => 2,
            Stream::Sampling => 3,
            Stream::Synthesis => 4,
            Stream::Split => 5,
            Stream::MonteCarlo => 6,
        }
    }
}

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
