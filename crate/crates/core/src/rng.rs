//! Deterministic RNG streams.
//!
//! Every random decision is drawn from a stream keyed by `(seed, purpose, epoch, step)` so
//! that a run can be resumed from any step without replaying earlier draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating independent streams derived from the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    BatchShuffle = 2,
    RankShuffle = 3,
    Dataset = 4,
    Probe = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the stream key into a single 64-bit seed.
pub fn derive_seed(seed: u64, stream: Stream, epoch: u64, step: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ epoch);
    splitmix64(h ^ step)
}

pub fn stream_rng(seed: u64, stream: Stream, epoch: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, epoch, step))
}
