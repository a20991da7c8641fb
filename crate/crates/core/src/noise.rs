//! Replayable standard-normal noise.
//!
//! Every perturbation direction is a ChaCha8 keystream addressed by `(seed, stream)`,
//! so the same direction can be regenerated any number of times without storing it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Address of one perturbation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PerturbationSeed {
    pub seed: u64,
    pub stream_index: u64,
}

impl PerturbationSeed {
    pub fn new(seed: u64, stream_index: u64) -> Self {
        PerturbationSeed { seed, stream_index }
    }

    /// Direction `index` of optimizer step `step_index` under `master_seed`.
    pub fn for_step(master_seed: u64, step_index: u64, index: u64) -> Self {
        PerturbationSeed { seed: mix(master_seed ^ mix(step_index)), stream_index: index }
    }

    /// A fresh iterator over this direction, starting at coordinate 0.
    pub fn stream(&self) -> NoiseStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_index);
        NoiseStream { rng }
    }
}

/// Infinite iterator of i.i.d. `N(0, 1)` samples.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl Iterator for NoiseStream {
    type Item = f64;

    #[inline]
    fn next(&mut self) -> Option<f64> {
        Some(StandardNormal.sample(&mut self.rng))
    }
}

/// The first `length` samples of the direction addressed by `seed`.
pub fn generate_noise(seed: PerturbationSeed, length: usize) -> std::iter::Take<NoiseStream> {
    seed.stream().take(length)
}

// SplitMix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_is_bitwise_identical() {
        let s = PerturbationSeed::new(42, 3);
        let a: Vec<u64> = generate_noise(s, 1000).map(f64::to_bits).collect();
        let b: Vec<u64> = generate_noise(s, 1000).map(f64::to_bits).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_stream() {
        assert_eq!(generate_noise(PerturbationSeed::new(1, 0), 0).count(), 0);
    }

    #[test]
    fn streams_differ() {
        let a: Vec<f64> = generate_noise(PerturbationSeed::new(7, 0), 16).collect();
        let b: Vec<f64> = generate_noise(PerturbationSeed::new(7, 1), 16).collect();
        let c: Vec<f64> = generate_noise(PerturbationSeed::for_step(7, 1, 0), 16).collect();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn prefix_is_stable() {
        // A shorter request is a prefix of a longer one.
        let s = PerturbationSeed::for_step(9, 4, 2);
        let long: Vec<f64> = generate_noise(s, 100).collect();
        let short: Vec<f64> = generate_noise(s, 10).collect();
        assert_eq!(&long[..10], &short[..]);
    }

    #[test]
    fn moments_of_a_million_samples() {
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for x in generate_noise(PerturbationSeed::new(2024, 0), n) {
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 200_000;
        let dot: f64 = generate_noise(PerturbationSeed::new(5, 0), n)
            .zip(generate_noise(PerturbationSeed::new(5, 1), n))
            .map(|(a, b)| a * b)
            .sum();
        // Standard error of the sample correlation is 1/sqrt(n) ≈ 0.0022.
        assert!((dot / n as f64).abs() < 0.01);
    }
}
