//! Seeded randomness and content digests.
//!
//! Every stochastic operation in this crate derives its generator from an
//! explicit `u64` seed through these helpers, so identical seeds give
//! bit-identical results on every run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a stream label.
/// Used when one logical seed drives several unrelated draws (shuffling,
/// init, noise) that must not be order-coupled.
pub fn derived_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Fisher-Yates shuffle driven by the provided generator.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// SHA-256 hex digest of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

/// SHA-256 hex digest of f32 values serialized little-endian.
pub fn digest_f32(values: &[f32]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex_string(&hasher.finalize())
}

/// First 8 bytes of the SHA-256 of `bytes`; the payload checksum used by the
/// binary containers.
pub fn checksum8(bytes: &[u8]) -> [u8; 8] {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out[..8].try_into().unwrap()
}

/// Seeded unstratified train/holdout index split. The holdout side gets
/// `round(n * fraction)` items, clamped so both sides stay nonempty.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!(n >= 2, "holdout split needs at least two items");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    shuffle(&mut order, &mut rng);
    let held = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let holdout = order.split_off(n - held);
    (order, holdout)
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
