//! Counter-based random streams.
//!
//! Every chain, replication and per-unit update draws from its own ChaCha
//! stream keyed by `(seed, stream id)`. Replaying a stream from the same
//! position reproduces the same numbers on every platform.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// A stream whose id is a hash of `tags`; distinct tag tuples give
    /// distinct streams under the same seed.
    pub fn derived(seed: u64, tags: &[u64]) -> Self {
        Self::new(seed, stream_id(tags))
    }

    /// Child stream of this one, independent of its current position.
    pub fn child(&self, tags: &[u64]) -> Self {
        let mut all = Vec::with_capacity(tags.len() + 1);
        all.push(self.stream);
        all.extend_from_slice(tags);
        Self::derived(self.seed, &all)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_position(&mut self, pos: u128) {
        self.inner.set_word_pos(pos);
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_id(tags: &[u64]) -> u64 {
    tags.iter()
        .fold(0x6A09_E667_F3BC_C909, |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
