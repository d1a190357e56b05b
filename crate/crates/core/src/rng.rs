//! Seed derivation for reproducible parallel runs.
//!
//! Every random stream is a ChaCha8 keystream selected by the pair
//! `(master seed, stream id)`. ChaCha is counter based, so a worker that
//! owns stream `k` produces the same numbers regardless of how many other
//! workers exist or in which order they are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::maps::SectionPoint;

/// Purpose tag folded into the stream id so that e.g. "trial 3" and
/// "ensemble member 3" never share a keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Center = 1,
    Measure = 2,
    Trial = 3,
    Ensemble = 4,
    Scan = 5,
    Control = 6,
    Block = 7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeder {
    master: u64,
}

impl Seeder {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, domain: Domain, member: u64) -> ChaCha8Rng {
        debug_assert!(member < (1 << 48));
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(((domain as u64) << 48) | member);
        rng
    }

    /// Derives an independent seeder, e.g. for a sub-experiment.
    pub fn child(&self, tag: u64) -> Seeder {
        let mut rng = self.stream(Domain::Control, (1 << 47) | tag);
        Seeder::new(rng.random())
    }
}

pub fn uniform_point<R: Rng + ?Sized>(rng: &mut R) -> SectionPoint {
    SectionPoint::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
}
