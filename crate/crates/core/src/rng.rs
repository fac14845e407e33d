//! Counter-based random streams.
//!
//! Every consumer of randomness derives its own generator from a
//! [`StreamKey`] built out of `(seed, purpose, index...)`. Streams are
//! stateless with respect to each other: adding a new consumer never shifts
//! the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator type used throughout the crate.
pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        Self(splitmix64(seed ^ 0x5eed_c0de_0000_0001))
    }

    /// Derives a named sub-stream.
    pub fn child(self, purpose: &str) -> Self {
        Self(splitmix64(self.0 ^ fnv1a(purpose.as_bytes())))
    }

    /// Derives an indexed sub-stream (step, layer, epoch, ...).
    pub fn index(self, i: u64) -> Self {
        Self(splitmix64(self.0.rotate_left(17) ^ splitmix64(i.wrapping_add(0x9e37))))
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
