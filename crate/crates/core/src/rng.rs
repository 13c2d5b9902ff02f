//! Reproducible random streams.
//!
//! A stream is a `(master seed, stream id)` pair mapped onto a ChaCha8
//! generator: the seed expands into the key, the id selects one of ChaCha's
//! 2^64 independent streams. Child streams are keyed by structured labels,
//! so draws never depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// What a child stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamKind {
    Init,
    Sweep,
    Atom,
    Predict,
    Simulate,
    Replicate,
    Test,
}

impl StreamKind {
    fn code(self) -> u64 {
        match self {
            StreamKind::Init => 1,
            StreamKind::Sweep => 2,
            StreamKind::Atom => 3,
            StreamKind::Predict => 4,
            StreamKind::Simulate => 5,
            StreamKind::Replicate => 6,
            StreamKind::Test => 7,
        }
    }
}

/// Structured key of a child stream, e.g. (iteration 12, atom of voxel 40).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamLabel {
    pub kind: StreamKind,
    pub iteration: u64,
    pub index: u64,
}

impl StreamLabel {
    pub fn new(kind: StreamKind, iteration: u64, index: u64) -> Self {
        Self { kind, iteration, index }
    }

    pub fn sweep(iteration: u64) -> Self {
        Self::new(StreamKind::Sweep, iteration, 0)
    }

    pub fn atom(iteration: u64, voxel: u64) -> Self {
        Self::new(StreamKind::Atom, iteration, voxel)
    }

    fn hash(&self) -> u64 {
        let mut h = splitmix64(self.kind.code());
        h = splitmix64(h ^ self.iteration);
        splitmix64(h ^ self.index.rotate_left(17))
    }
}

/// A reproducible random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Deterministic child stream for `label`.
    pub fn substream(&self, label: StreamLabel) -> RngStream {
        RngStream { seed: self.seed, stream: splitmix64(self.stream ^ label.hash()) }
    }

    /// The generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut z = self.seed;
        for chunk in key.chunks_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng
    }
}

/// Free-function form of [`RngStream::substream`].
pub fn rng_substream(master: &RngStream, label: StreamLabel) -> RngStream {
    master.substream(label)
}
