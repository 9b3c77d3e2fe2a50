//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform noise in [-0.5, 0.5).
pub fn noise(seed: u64, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_seeded_and_bounded() {
        let a = noise(3, 1000);
        assert_eq!(a, noise(3, 1000));
        assert_ne!(a, noise(4, 1000));
        assert!(a.iter().all(|v| (-0.5..0.5).contains(v)));
    }
}
