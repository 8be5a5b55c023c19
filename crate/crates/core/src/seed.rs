//! Seed derivation: every component seed is a pure function of one root.

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of tile `index` under `root`: `root XOR splitmix64(index)`.
pub fn tile_seed(root: u64, index: u64) -> u64 {
    root ^ splitmix64(index)
}

/// Seed of a named sub-component, e.g. `derive_seed(root, "band-3")`.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    // FNV-1a over the tag
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(root ^ h)
}
