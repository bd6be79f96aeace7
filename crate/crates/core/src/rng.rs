//! Antithetic standard normal draws.
//!
//! Pair `j` gets its own ChaCha8 stream (`set_stream(j)`) under a common seed, and
//! step `n` is the `n`-th draw of that stream. The draws therefore depend only on
//! `(seed, j, n)`, never on how the work is scheduled.

use alloc::vec::Vec;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq)]
pub struct Normals {
    pairs: usize,
    steps: usize,
    z: Vec<f64>,
}

impl Normals {
    pub fn generate(seed: u64, pairs: usize, steps: usize) -> Self {
        let mut z = Vec::with_capacity(pairs * steps);
        for j in 0..pairs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            z.extend((0..steps).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        }
        Self { pairs, steps, z }
    }

    pub fn zeros(pairs: usize, steps: usize) -> Self {
        Self { pairs, steps, z: alloc::vec![0.0; pairs * steps] }
    }

    /// Draws for the first half of the paths, `pairs x steps` row-major.
    pub fn from_half(pairs: usize, steps: usize, z: Vec<f64>) -> Option<Self> {
        (z.len() == pairs * steps).then_some(Self { pairs, steps, z })
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn paths(&self) -> usize {
        2 * self.pairs
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `Z_n` for path `j`; path `j + J/2` sees `-Z_n` of path `j`.
    #[inline]
    pub fn get(&self, j: usize, n: usize) -> f64 {
        if j < self.pairs {
            self.z[j * self.steps + n]
        } else {
            -self.z[(j - self.pairs) * self.steps + n]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn antithetic_and_deterministic() {
        let a = Normals::generate(7, 4, 10);
        let b = Normals::generate(7, 4, 10);
        assert_eq!(a, b);
        for j in 0..4 {
            for n in 0..10 {
                assert_eq!(a.get(j + 4, n), -a.get(j, n));
            }
        }
        assert_ne!(a, Normals::generate(8, 4, 10));
    }

    #[test]
    fn streams_do_not_depend_on_pair_count() {
        let small = Normals::generate(3, 2, 5);
        let large = Normals::generate(3, 6, 5);
        for n in 0..5 {
            assert_eq!(small.get(1, n), large.get(1, n));
        }
    }

    #[test]
    fn moments() {
        let z = Normals::generate(11, 2000, 50);
        let n = (z.pairs() * z.steps()) as f64;
        let mean: f64 = z.z.iter().sum::<f64>() / n;
        let var: f64 = z.z.iter().map(|v| v * v).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }
}
