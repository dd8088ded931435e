//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`Pcg64`] (PCG XSL-RR 128/64,
//! `rand_pcg::Lcg128Xsl64`) seeded through [`SeedableRng::seed_from_u64`].
//! Sub-streams are derived from a root seed, a module tag and an index with
//! [`derive_seed`], so any component can reproduce the same draws.

use rand::SeedableRng;
pub use rand_pcg::Pcg64;

/// Name recorded in dataset and run manifests.
pub const RNG_NAME: &str = "pcg64-xsl-rr-128/64 (rand_pcg::Lcg128Xsl64, seed_from_u64)";

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// `splitmix64(splitmix64(seed ^ fnv1a(tag)) ^ index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(tag)) ^ index)
}

pub fn rng_for(seed: u64, tag: &str, index: u64) -> Pcg64 {
    Pcg64::seed_from_u64(derive_seed(seed, tag, index))
}
