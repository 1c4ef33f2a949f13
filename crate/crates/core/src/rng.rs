//! Counter-based random substreams.
//!
//! Every random draw in the library comes from a generator seeded by hashing
//! a run seed together with a path of integer keys (example index, phase,
//! draw index, ...). Work can therefore be split across threads in any order
//! without changing a single bit of the output.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

/// Purpose tags that keep the substreams of different procedures disjoint.
pub mod phase {
    pub const SELECTION: u64 = 1;
    pub const ESTIMATION: u64 = 2;
    pub const PREDICT: u64 = 3;
    pub const ATTACK: u64 = 5;
    pub const DATA: u64 = 6;
    pub const WORLD: u64 = 7;
    pub const REFERENCE: u64 = 8;
    pub const TRAIN: u64 = 9;
    pub const INIT: u64 = 10;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and a key path into a single 64-bit stream id.
pub fn stream_id(seed: u64, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6A09_E667_F3BC_C909);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x3C6E_F372_FE94_F82B)));
    }
    h
}

pub fn substream(seed: u64, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(stream_id(seed, keys))
}

/// Fills `out` with independent `N(0, sigma^2)` draws.
pub fn fill_normal<R: rand::Rng + ?Sized>(rng: &mut R, sigma: f64, out: &mut [f64]) {
    for v in out {
        let z: f64 = StandardNormal.sample(rng);
        *v = sigma * z;
    }
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, sigma: f64, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    fill_normal(rng, sigma, &mut v);
    v
}
