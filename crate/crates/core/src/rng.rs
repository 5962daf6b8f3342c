//! Seeded randomness.
//!
//! Every random draw in the crate comes from a ChaCha8 stream
//! (`rand_chacha::ChaCha8Rng`, a counter-based generator whose output is
//! fixed by its 32-byte key and is identical on every platform). Gaussian
//! samples use the ziggurat sampler from `rand_distr::StandardNormal`.
//!
//! A single experiment seed fans out into independent per-stage streams:
//! the stage seed is the first 8 bytes (little endian) of
//! `SHA-256("<seed>/<stage name>")`. Stage names are plain strings such as
//! `"gen-data"` or `"train/epoch-3/step-7"`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

/// Derive the seed of a named stage from an experiment seed.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{stage}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Generator for a named stage of an experiment.
pub fn stage_rng(seed: u64, stage: &str) -> StageRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stage))
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| gaussian(rng)).collect()
}

/// Standard normal draw rescaled to unit Euclidean norm.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T, R: Rng + ?Sized>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_and_repeat() {
        assert_eq!(derive_seed(7, "gen-data"), derive_seed(7, "gen-data"));
        assert_ne!(derive_seed(7, "gen-data"), derive_seed(7, "prune"));
        assert_ne!(derive_seed(7, "gen-data"), derive_seed(8, "gen-data"));
    }

    #[test]
    fn unit_vectors_have_unit_norm() {
        let mut rng = stage_rng(1, "t");
        for dim in [1, 3, 64] {
            let v = unit_vector(&mut rng, dim);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = stage_rng(3, "shuffle");
        let mut v: Vec<usize> = (0..50).collect();
        shuffle(&mut rng, &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
