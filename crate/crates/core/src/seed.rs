//! Seed derivation. Every random stream in an experiment is derived from one
//! master seed by a counter-based rule:
//!
//! ```text
//! derive(master, label, index) = splitmix64(master ^ fnv1a64(label) ^ splitmix64(index))
//! ```
//!
//! Streams are `ChaCha8Rng`, whose output is identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn fnv1a64(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(master ^ fnv1a64(label) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, label: &str, index: u64) -> Rng {
    rng(derive(master, label, index))
}
