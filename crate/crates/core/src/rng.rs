//! Seed derivation. Every consumer of randomness (parameter init, data order,
//! latent noise, dataset synthesis, evaluation) gets its own ChaCha stream
//! derived from the master seed, so streams never interfere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Latent = 3,
    Synth = 4,
    Eval = 5,
    Split = 6,
}

/// One step of the splitmix64 generator.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream as u64) ^ index)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, stream, index))
}
