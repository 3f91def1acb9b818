//! Splittable, counter-keyed random streams.
//!
//! Every random quantity in the crate is drawn from a stream identified by a
//! path `(master seed, tag, index, ...)`. The path is hashed into a 256-bit
//! ChaCha key, so any stream can be rebuilt independently of how many other
//! streams were consumed before it or on which worker it runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(key: u64, word: u64) -> u64 {
    let mut s = key ^ word.rotate_left(17);
    splitmix64(&mut s) ^ splitmix64(&mut s).rotate_left(32)
}

/// A node in the stream tree. Cheap to copy; derive children with
/// [`SeedStream::tag`] and [`SeedStream::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    master: u64,
    key: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        let mut s = master;
        Self { master, key: splitmix64(&mut s) }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn tag(&self, tag: &str) -> Self {
        Self { master: self.master, key: mix(self.key, fnv1a(tag.as_bytes())) }
    }

    pub fn index(&self, i: u64) -> Self {
        Self { master: self.master, key: mix(self.key, i ^ 0xa076_1d64_78bd_642f) }
    }

    pub fn rng(&self) -> StreamRng {
        let mut s = self.key;
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

/// Where an estimate's randomness came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedProvenance {
    pub master: u64,
    pub tag: String,
}

impl SeedProvenance {
    pub fn new(master: u64, tag: impl Into<String>) -> Self {
        Self { master, tag: tag.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_stream() {
        let a = SeedStream::new(7).tag("env").index(3);
        let b = SeedStream::new(7).tag("env").index(3);
        let xa: Vec<u64> = a.rng().random_iter().take(4).collect();
        let xb: Vec<u64> = b.rng().random_iter().take(4).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn distinct_paths_differ() {
        let root = SeedStream::new(7);
        let keys = [
            root.tag("env").index(0),
            root.tag("env").index(1),
            root.tag("path").index(0),
            SeedStream::new(8).tag("env").index(0),
        ];
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                assert_ne!(keys[i], keys[j]);
                assert_ne!(keys[i].rng().random::<u64>(), keys[j].rng().random::<u64>());
            }
        }
    }
}
