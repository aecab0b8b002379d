//! Replayable random streams.
//!
//! Every stochastic unit of work (one subject in one E-step, one bootstrap
//! replicate, one simulation replication) draws from its own ChaCha stream
//! whose seed is a hash of the run seed and the unit's identity. Results are
//! therefore independent of thread count and of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derives a child seed from a parent seed and a sequence of labels.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn key_hash(key: &str) -> u64 {
    fnv1a(key.as_bytes())
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Stream for one subject inside one E-step pass.
pub fn subject_stream(seed: u64, iteration: u64, subject_id: &str, pass: u64) -> ChaCha8Rng {
    stream(seed, &[iteration, key_hash(subject_id), pass])
}
