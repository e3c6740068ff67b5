//! Hierarchical, splittable seed streams.
//!
//! A [`Stream`] is a 64-bit key. Children are derived by mixing the parent key
//! with a tag, so every consumer of randomness (mask draws for a round, the
//! sample indices of one client in one round, the shuffle of one epoch) owns
//! an independent generator that depends only on the master seed and its
//! position in the hierarchy. Adding a consumer never shifts the numbers seen
//! by another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tags of the first level below a run's master seed.
pub mod tags {
    pub const MASKS: u64 = 0x6d61_736b;
    pub const SAMPLES: u64 = 0x7361_6d70;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const OUTPUT: u64 = 0x6f75_7470;
    pub const DATA: u64 = 0x6461_7461;
    pub const CONSTANTS: u64 = 0x636f_6e73;
    pub const EVAL: u64 = 0x6576_616c;
    pub const NEIGHBOR: u64 = 0x6e65_6967;
}

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self { key: mix(seed ^ 0x9e37_79b9_7f4a_7c15) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream identified by `tag`.
    pub fn child(&self, tag: u64) -> Stream {
        Stream {
            key: mix(self.key.wrapping_add(mix(tag.wrapping_add(0xd1b5_4a32_d192_ed03)))),
        }
    }

    /// Shorthand for `self.child(a).child(b)`.
    pub fn path(&self, tags: &[u64]) -> Stream {
        tags.iter().fold(*self, |s, &t| s.child(t))
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

/// Stream of the Bernoulli mask draws of global round `round`.
pub fn mask_stream(master: u64, round: u64) -> Stream {
    Stream::new(master).path(&[tags::MASKS, round])
}

/// Stream of client `client`'s sample indices in global round `round`.
pub fn sample_stream(master: u64, round: u64, client: u64) -> Stream {
    Stream::new(master).path(&[tags::SAMPLES, round, client])
}

/// Stream of the permutation drawn at the start of epoch `epoch`.
pub fn shuffle_stream(master: u64, epoch: u64) -> Stream {
    Stream::new(master).path(&[tags::SHUFFLE, epoch])
}

/// Stream of the masks used by the output step.
pub fn output_stream(master: u64) -> Stream {
    Stream::new(master).child(tags::OUTPUT)
}

/// Derives a seed from `(master, a, b)`, e.g. sweep cell and replicate index.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    Stream::new(master).path(&[a, b]).key()
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
