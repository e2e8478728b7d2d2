//! Seed derivation for partitioned, reproducible random streams.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! derived from the run seed plus a stable label, so adding a consumer never
//! perturbs the draws of another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte string. Stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a label and a list of numeric ids.
pub fn derive(seed: u64, label: &str, ids: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ fnv1a(label.as_bytes()));
    for id in ids {
        h = splitmix(h ^ splitmix(*id));
    }
    h
}

pub fn stream(seed: u64, label: &str, ids: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label, ids))
}

/// Deterministic uniform draw in `[0, 1)` keyed by strings, for decisions that
/// must not depend on draw order (e.g. whether a tracker is embedded on a page).
pub fn keyed_unit(seed: u64, parts: &[&str]) -> f64 {
    let mut h = splitmix(seed);
    for p in parts {
        h = splitmix(h ^ fnv1a(p.as_bytes()));
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}
