//! Named, splittable random streams.
//!
//! Every stochastic step draws from its own `ChaCha8Rng` whose seed is a
//! hash of the run seed and a stream label, so adding a new consumer never
//! perturbs the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `label`/`index`.
    pub fn split(&self, label: &str, index: u64) -> SeedStream {
        let mut h = splitmix(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        for b in label.bytes() {
            h = splitmix(h ^ u64::from(b));
        }
        SeedStream {
            seed: splitmix(h ^ splitmix(index)),
        }
    }

    pub fn rng(&self, label: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.split(label, index).seed)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
