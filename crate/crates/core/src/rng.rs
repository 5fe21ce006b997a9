//! Counter-based seed derivation.
//!
//! Every random stream is keyed by `(root seed, stage label, index)` and
//! hashed with splitmix64, so adding a stage or reordering work never
//! perturbs another stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derives a child seed for stream `(label, index)` under `root`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let a = splitmix64(root ^ label_hash(label));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream(root: u64, label: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, label, index))
}
