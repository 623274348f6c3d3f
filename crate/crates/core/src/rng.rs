//! Named, splittable random streams.
//!
//! Every random draw in a run descends from one global seed. A stream is
//! identified by a path of names (`"init"`, `"init/connector"`, ...), and each
//! path maps to its own ChaCha stream so that adding draws to one consumer never
//! shifts the values another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
    key: u64,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, key: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives the child stream `name` of this stream.
    pub fn child(&self, name: &str) -> Self {
        Self {
            seed: self.seed,
            key: mix(self.key ^ fnv1a(name.as_bytes())),
        }
    }

    /// Derives a child stream keyed by an integer (e.g. a run index).
    pub fn index(&self, i: u64) -> Self {
        Self {
            seed: self.seed,
            key: mix(self.key.wrapping_add(mix(i ^ 0xA5A5_A5A5))),
        }
    }

    /// Materializes the generator for this stream.
    pub fn rng(&self) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.key);
        rng
    }

    /// Collapses the stream into a single 64-bit seed for APIs that take one.
    pub fn as_u64(&self) -> u64 {
        mix(self.seed ^ mix(self.key))
    }
}
