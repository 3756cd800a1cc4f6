//! Platform-stable 64-bit seed mixing (SplitMix64 finalizer chained over the inputs).

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic mix of an ordered list of words into one seed.
pub fn mix(words: &[u64]) -> u64 {
    let mut state = finalize(GOLDEN ^ words.len() as u64);
    for &w in words {
        state = finalize(state.wrapping_add(GOLDEN) ^ finalize(w.wrapping_add(GOLDEN)));
    }
    state
}
