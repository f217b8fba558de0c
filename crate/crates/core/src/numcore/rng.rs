//! Named seed derivation.
//!
//! Every random stream is obtained by hashing a path of labels and indices
//! onto the root seed, e.g. `root / "augment" / epoch / sample`. Streams for
//! different purposes therefore never shift one another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedKey(u64);

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl SeedKey {
    pub fn root(seed: u64) -> Self {
        SeedKey(splitmix(seed))
    }

    pub fn derive(self, label: &str) -> Self {
        SeedKey(splitmix(self.0 ^ fnv1a(label)))
    }

    pub fn index(self, i: u64) -> Self {
        SeedKey(splitmix(self.0.rotate_left(17) ^ splitmix(i)))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
