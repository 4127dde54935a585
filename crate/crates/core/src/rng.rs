//! Keyed random streams.
//!
//! Every stream is a ChaCha8 generator whose key is derived from
//! `(seed, domain, key)` and whose stream id selects a sub-stream. ChaCha is
//! itself counter based, so each (key, stream) pair is an independent
//! sequence and the values drawn never depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const DOMAIN_NOISE: u64 = 0x6e6f_6973_6500_0001;
pub(crate) const DOMAIN_INITIAL: u64 = 0x696e_6974_0000_0002;
pub(crate) const DOMAIN_PROBE: u64 = 0x7072_6f62_6500_0003;
pub(crate) const DOMAIN_PERTURB: u64 = 0x7065_7274_0000_0004;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, domain, key)` on sub-stream `stream`.
pub(crate) fn keyed(seed: u64, domain: u64, key: u64, stream: u64) -> ChaCha8Rng {
    let k = splitmix64(splitmix64(seed ^ domain).wrapping_add(key));
    let mut rng = ChaCha8Rng::seed_from_u64(k);
    rng.set_stream(stream);
    rng
}
