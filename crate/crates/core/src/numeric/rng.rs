//! Seeded, splittable random streams.
//!
//! Each consumer asks for a stream by `(seed, label)` and optionally an index,
//! so data generation, initialization and sampling never share state and stay
//! reproducible regardless of call order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit id for a label (FNV-1a, then mixed).
pub fn label_id(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(h)
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ label_id(label))
}

pub fn stream_rng(seed: u64, label: &str) -> StreamRng {
    indexed_rng(seed, label, 0)
}

/// Independent stream `index` under `(seed, label)`, e.g. one per user.
pub fn indexed_rng(seed: u64, label: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    rng.set_stream(index);
    rng
}
