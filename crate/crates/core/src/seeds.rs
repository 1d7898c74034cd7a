//! Deterministic sub-seed derivation.

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of integers into one seed. Distinct sequences give
/// unrelated seeds.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6D70_7365_6721_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}
