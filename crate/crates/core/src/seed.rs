//! Seed splitting.
//!
//! Every source of randomness in a run is derived from one master seed via
//! splitmix64 expansion of `(master, stream, index)`. Streams are disjoint
//! tags, so adding nodes never reuses another component's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

/// Named derivation streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Topology = 1,
    Init = 2,
    Partition = 3,
    Batches = 4,
    Data = 5,
    TestData = 6,
    Holdout = 7,
    Lipschitz = 8,
}

/// One round of the splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, stream, index)`.
pub fn derive(master: u64, stream: Stream, index: u64) -> u64 {
    let a = splitmix64(master ^ (stream as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    splitmix64(a ^ splitmix64(index))
}

pub fn rng_from(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> SimRng {
    rng_from(derive(master, stream, index))
}
