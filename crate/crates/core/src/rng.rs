//! Deterministic random streams.
//!
//! Every random decision in a run draws from a ChaCha8 stream keyed by a tuple
//! of integers (seed, purpose, epoch, step, ...). Streams are independent of
//! the order in which they are created, which keeps runs reproducible when work
//! is reordered or parallelised.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags so that streams for different jobs never share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Dataset = 2,
    Shuffle = 3,
    Pairing = 4,
    Augment = 5,
    Strategy = 6,
    Probe = 7,
    Split = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds the key parts into one 64-bit seed.
pub fn derive_seed(seed: u64, stream: Stream, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, parts))
}
