//! One master seed, many independent streams.
//!
//! Every stochastic component draws from its own ChaCha stream keyed by
//! `(component, index)`, so changing how much randomness one component
//! consumes never shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Component {
    StudentInit = 1,
    ProjectorInit = 2,
    AuxInit = 3,
    GeneratorInit = 4,
    Noise = 5,
    Labels = 6,
    Rotation = 7,
    BankSample = 8,
    WarmUp = 9,
    TeacherInit = 10,
    PretrainShuffle = 11,
    Probe = 12,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream for `component` at `index` (usually the round number).
    pub fn stream(&self, component: Component, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((component as u64) << 40) ^ index);
        rng
    }
}
