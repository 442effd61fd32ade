//! Deterministic seed derivation.

/// SplitMix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one clip in one epoch of a run.
pub fn derive(global: u64, clip: u64, epoch: u64) -> u64 {
    mix(mix(mix(global) ^ clip) ^ epoch.wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Independent stream tagged by a small integer purpose code.
pub fn stream(seed: u64, purpose: u64) -> u64 {
    mix(seed ^ mix(purpose.wrapping_add(0x5851_F42D_4C95_7F2D)))
}
