//! Pinned pseudo-random streams.
//!
//! All randomness goes through xoshiro256++ seeded via splitmix64, so every
//! artifact is bit-reproducible across platforms. Independent streams are
//! derived from a base seed plus a textual tag or a numeric id.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Prng = Xoshiro256PlusPlus;

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn mix(seed: u64, id: u64) -> u64 {
    let mut s = seed ^ id.rotate_left(32);
    splitmix64(&mut s) ^ splitmix64(&mut s).rotate_left(17)
}

/// Stream keyed by a numeric id (e.g. a sample index).
pub fn stream(seed: u64, id: u64) -> Prng {
    Prng::seed_from_u64(mix(seed, id))
}

/// Stream keyed by a name (e.g. a parameter path).
pub fn named(seed: u64, tag: &str) -> Prng {
    stream(seed, fnv1a64(tag.as_bytes()))
}
