//! Deterministic random substreams.
//!
//! Every random decision in a run derives from one `u64` seed. Each consumer
//! gets its own ChaCha stream keyed by `(seed, stream, a, b)`, so changing how
//! many numbers one consumer draws never shifts another consumer's draws,
//! and per-user work can run in any order or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    DataSplit,
    Init,
    Queue,
    Negatives,
    MonteCarlo,
    Fixture,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::DataSplit => 0x5350_4c49_5400_0001,
            Stream::Init => 0x494e_4954_0000_0002,
            Stream::Queue => 0x5155_4555_4500_0003,
            Stream::Negatives => 0x4e45_4741_5449_0004,
            Stream::MonteCarlo => 0x4d43_0000_0000_0005,
            Stream::Fixture => 0x4649_5854_5552_0006,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns the substream for `(seed, stream, a, b)`.
///
/// `a` and `b` are free coordinates; the trainer uses `(epoch, user)`.
pub fn substream(seed: u64, stream: Stream, a: u64, b: u64) -> Rng {
    let mut key = [0u8; 32];
    let words = [
        splitmix64(seed),
        splitmix64(seed ^ stream.tag()),
        splitmix64(a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.tag()),
        splitmix64(b ^ splitmix64(a ^ seed)),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Shorthand for a stream that needs no coordinates.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    substream(seed, stream, 0, 0)
}
