//! Seed derivation.
//!
//! Every random decision in a run descends from one `u64` seed. A
//! consumer asks for a [`Stream`]; the generator is ChaCha8 keyed by the
//! seed, with the stream id (and an optional index) selecting ChaCha's
//! 64-bit stream counter, so substreams never overlap and are identical
//! on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Fixed stream ids. Changing a value changes every downstream result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synthesis = 1,
    Split = 2,
    Init = 3,
    TrainEpisodes = 4,
    DropoutMasks = 5,
    TrainShuffle = 6,
    Validation = 7,
    EvalEpisodes = 8,
    EvalShuffle = 9,
    Dump = 10,
}

pub fn stream(seed: u64, stream: Stream) -> Rng {
    substream(seed, stream, 0)
}

/// The `index`-th member of a family of streams, e.g. one per evaluation
/// seed. ChaCha stream id is `(stream << 32) | index`.
pub fn substream(seed: u64, stream: Stream, index: u32) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | index as u64);
    rng
}
