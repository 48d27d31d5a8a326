//! Seed fan-out.
//!
//! A run has one master seed. Every consumer of randomness gets its own
//! ChaCha stream keyed by `(master, stream, index)`, so changing how one
//! component draws never shifts the numbers another component sees.
//!
//! Key derivation: the three words are folded through splitmix64,
//! `k = mix(mix(mix(master) ^ stream) ^ index)`, and `k` seeds a
//! `ChaCha8Rng` via `seed_from_u64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named randomness consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Selection = 3,
    Partition = 4,
    /// Per-client training: batch order and augmentations.
    /// Index = `client_id << 32 | round`.
    Client = 5,
    Eval = 6,
    Queue = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream as u64) ^ index)
}

pub fn stream(master: u64, stream: Stream, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
