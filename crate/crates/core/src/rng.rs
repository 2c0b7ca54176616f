//! Named, independent random streams derived from one master seed.
//!
//! Every consumer asks for a stream by a fixed key path, e.g.
//! `(Stream::Rollout, epoch, trajectory_index)`. The derived generator
//! depends only on the master seed and the key, never on how many other
//! streams were drawn before it, so worker count and call order cannot
//! change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type CocaRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Rollout = 2,
    Shuffle = 3,
    Pretrain = 4,
    Verify = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the master seed with a key path into a 64-bit seed.
pub fn derive_seed(master: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(stream as u64));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream_rng(master: u64, stream: Stream, path: &[u64]) -> CocaRng {
    CocaRng::seed_from_u64(derive_seed(master, stream, path))
}
