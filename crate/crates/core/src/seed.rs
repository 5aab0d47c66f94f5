//! Seed derivation and the crate-wide RNG type.
//!
//! Every stochastic stage takes an explicit `u64` seed. A run-level seed is
//! fanned out to stages with [`derive_seed`], which hashes the global seed
//! together with a stage name, so adding a stage never shifts the seeds of
//! the others.

use rand::SeedableRng;
use sha2::{Digest, Sha256};

/// The RNG used everywhere randomness is needed. ChaCha output is specified
/// independently of platform and crate version, which keeps seeded runs
/// reproducible.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// `sub_seed = sha256(global_seed_le || stage_name)[..8]` read little-endian.
pub fn derive_seed(global_seed: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Hex SHA-256 over a sequence of byte chunks; used for dataset and config
/// fingerprints recorded in artifact sidecars.
pub fn fingerprint<'a>(chunks: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut hasher = Sha256::new();
    for chunk in chunks {
        hasher.update((chunk.len() as u64).to_le_bytes());
        hasher.update(chunk);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(42, "pairs"), derive_seed(42, "pairs"));
        assert_ne!(derive_seed(42, "pairs"), derive_seed(42, "train"));
        assert_ne!(derive_seed(42, "pairs"), derive_seed(43, "pairs"));
    }

    #[test]
    fn seeded_rng_repeats() {
        let a: Vec<u32> = (0..8).map({
            let mut r = rng(7);
            move |_| r.random()
        }).collect();
        let b: Vec<u32> = (0..8).map({
            let mut r = rng(7);
            move |_| r.random()
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn fingerprint_separates_chunk_boundaries() {
        assert_ne!(
            fingerprint([b"ab".as_slice(), b"c".as_slice()]),
            fingerprint([b"a".as_slice(), b"bc".as_slice()])
        );
    }
}
