//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by `(seed, domain, index)`, so results never depend on the
//! order in which independent items are generated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
#[repr(u8)]
pub(crate) enum Domain {
    Init = 1,
    Grammar = 2,
    TrainImage = 3,
    TestImage = 4,
    Augment = 5,
    Shuffle = 6,
    Split = 7,
}

pub(crate) fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << 56);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) | index);
    rng
}

/// Mix two counters into a seed with the SplitMix64 finalizer.
pub(crate) fn derive(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
