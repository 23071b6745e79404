//! Named deterministic random streams.
//!
//! Every random choice in the pipeline derives from one master seed through
//! a labelled sub-stream, so independent components (data generation,
//! pairing, masks, weight init, probes) never share or collide on RNG state.
//! ChaCha8 keeps the streams portable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-period mixer over u64.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a sub-seed from a master seed, a stream label, and salts.
pub fn sub_seed(master: u64, label: &str, salts: &[u64]) -> u64 {
    let mut acc = splitmix64(master);
    for &b in label.as_bytes() {
        acc = splitmix64(acc ^ u64::from(b));
    }
    // domain separator between label bytes and salt values
    acc = splitmix64(acc ^ 0xa5a5_a5a5_a5a5_a5a5);
    for &s in salts {
        acc = splitmix64(acc ^ s);
    }
    acc
}

/// A seeded ChaCha8 stream for the given label and salts.
pub fn stream(master: u64, label: &str, salts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(master, label, salts))
}
