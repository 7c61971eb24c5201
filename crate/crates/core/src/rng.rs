//! Keyed random streams.
//!
//! Every stochastic site derives its own generator from the master seed, a
//! site label, and the entity/cycle keys it belongs to. Draws therefore do
//! not depend on evaluation order or on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut i = 0;
    while i < bytes.len() {
        h ^= bytes[i] as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
        i += 1;
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit derivation of (seed, label, keys).
pub fn derive(seed: u64, label: &str, keys: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ fnv1a(label.as_bytes()));
    for (i, k) in keys.iter().enumerate() {
        h = splitmix(h ^ splitmix(k.wrapping_add(i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)));
    }
    h
}

pub fn stream(seed: u64, label: &str, keys: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(seed, label, keys))
}
