//! Stable seed derivation.
//!
//! Every random stream in a run is keyed off a handful of base seeds. Child
//! seeds are derived with SplitMix64 so that they do not depend on the
//! standard library's hasher, which is free to change between releases.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `base`. Order matters: `derive(s, &[a, b]) != derive(s, &[b, a])`
/// in general.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed for a named stream, e.g. `derive_named(base, "ram")`.
pub fn derive_named(base: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed in like any other part.
    let tag = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    derive(base, &[tag])
}
