//! Seed-stream derivation. A single master seed fans out into independent
//! per-component streams (weight init, data shuffling, latent draws, ...) so
//! that ablations which share a master seed also share data order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Component streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    GeneratorInit,
    DiscriminatorInit,
    ClassifierInit,
    Latent,
    Shuffle,
    Synthetic,
    SyntheticVal,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::GeneratorInit => 1,
            Stream::DiscriminatorInit => 2,
            Stream::ClassifierInit => 3,
            Stream::Latent => 4,
            Stream::Shuffle => 5,
            Stream::Synthetic => 6,
            Stream::SyntheticVal => 7,
        }
    }
}

/// SplitMix64 output function; the standard 64-bit finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the sub-seed for one component stream.
pub fn derive(master: u64, stream: Stream) -> u64 {
    splitmix64(master ^ stream.tag().wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Derive a sub-seed keyed by stream plus a counter (e.g. epoch number).
pub fn derive_indexed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(derive(master, stream) ^ index.wrapping_mul(0xE703_7ED1_A0B4_28DB))
}

/// Deterministic RNG for one component stream.
pub fn rng(master: u64, stream: Stream) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(master, stream))
}

/// Deterministic RNG keyed by (stream, counter).
pub fn rng_indexed(master: u64, stream: Stream, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_indexed(master, stream, index))
}
