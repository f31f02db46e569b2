//! Small shared helpers.

/// Derive an independent sub-seed from a base seed and a stream tag.
///
/// SplitMix64 finalizer: decorrelates nearby (seed, tag) pairs so that the
/// trainer's init/shuffle/penalty streams and grid-search cells never share
/// RNG state.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
