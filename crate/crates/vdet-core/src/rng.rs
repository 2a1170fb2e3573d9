//! Seed derivation so per-item randomness is independent of scheduling.

/// splitmix64 step.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministically folds context values into a base seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = mix(base);
    for &p in parts {
        s = mix(s ^ mix(p));
    }
    s
}
