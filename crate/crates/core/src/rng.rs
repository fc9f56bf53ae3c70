//! Seeded, splittable random streams.
//!
//! Every stochastic draw in the simulator (weight init, dropout masks,
//! shuffles, edge selection, partitioning) comes from an [`RngStream`]
//! identified by a `(seed, stream)` pair. Streams for sub-tasks are derived
//! with [`RngStream::derive`] from a fixed path of integers, so the draws a
//! worker sees depend only on its identity and never on execution order.

use rand::{Error as RandError, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Fresh stream under the same seed whose id is a hash of this stream's
    /// id and `path`. The parent's position is irrelevant.
    pub fn derive(&self, path: &[u64]) -> Self {
        let id = path.iter().fold(mix(self.stream), |acc, &p| mix(acc ^ mix(p)));
        Self::new(self.seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), RandError> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Stream-path tags, so that derived streams for different purposes never
/// collide even when their numeric indices coincide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SELECT: u64 = 2;
    pub const EDGE: u64 = 3;
    pub const CLIENT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const PARTITION: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const STANDALONE: u64 = 8;
}
