//! Small, stable 64-bit hashes. Stability across builds matters here: the
//! stub encoders and mock service key their output on these values.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over `bytes`, with `seed` folded into the offset basis.
pub fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(seed);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer; used to decorrelate nearby seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hash of a sequence of floats by bit pattern.
pub fn hash_f64s(seed: u64, values: &[f64]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(seed);
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Derive a child seed for a named sub-stream of a top-level seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(fnv1a64(seed, label.as_bytes()))
}
