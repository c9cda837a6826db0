//! Seed derivation.
//!
//! Every random quantity in the crate comes from a ChaCha8 stream keyed by
//! `(seed, label)` and selected by an integer index (the draw, layer or
//! repetition number). Streams with different labels never share state, so
//! changing how many draws one consumer takes cannot shift another
//! consumer's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a; stable across platforms and releases.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Mix a parent seed with a label into a child seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ splitmix64(label_hash(label)))
}

/// Counter-style substream: same `(seed, label, index)` gives the same stream.
pub fn substream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    rng.set_stream(index);
    rng
}
