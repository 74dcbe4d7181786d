//! Counter-based random-number streams.
//!
//! Every random quantity in the crate is drawn from a stream addressed by
//! `(seed, stream index)`, so work units (subjects, bootstrap draws,
//! replicates) can be generated independently and in any order while staying
//! reproducible. Stream indices are mixed into the ChaCha key with SplitMix64.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 mixing step.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for stream `stream` of master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let key = splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5851_f42d_4c95_7f2d)));
    ChaCha12Rng::seed_from_u64(key)
}

/// Derive a child seed, for nesting stream families.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// One standard-normal draw.
pub fn normal<R: rand::Rng>(rng: &mut R) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}
