use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{DenseMatrix, Error, ParticleCloud, Result};

/// Reproducible random stream backed by ChaCha8.
///
/// ChaCha is counter based, so [`SeededRng::split`] derives child streams
/// that are independent of each other and of the parent, and identical across
/// runs and platforms.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    key: [u8; 32],
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut key);
        Self::from_key(seed, key)
    }

    fn from_key(seed: u64, key: [u8; 32]) -> Self {
        SeededRng {
            seed,
            key,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream number `stream`. Does not advance `self`.
    pub fn split(&self, stream: u64) -> SeededRng {
        let mut derive = ChaCha8Rng::from_seed(self.key);
        derive.set_stream(stream.wrapping_add(1));
        let mut key = [0u8; 32];
        derive.fill_bytes(&mut key);
        Self::from_key(self.seed, key)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            p.swap(i, j);
        }
        p
    }

    /// `k` distinct indices from `0..n`, in random order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k.min(n)).into_vec()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, stddev: f64) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| stddev * self.standard_normal())
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `n` i.i.d. draws from the isotropic Gaussian `N(mean, stddev² I)`.
pub fn gaussian_sample(
    rng: &mut SeededRng,
    n: usize,
    d: usize,
    mean: &[f64],
    stddev: f64,
) -> Result<ParticleCloud> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample size must be at least 1".into()));
    }
    if !(stddev > 0.0) || !stddev.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "stddev must be positive, got {stddev}"
        )));
    }
    if mean.len() != d {
        return Err(Error::dims("gaussian_sample", d, mean.len()));
    }
    let points = DenseMatrix::from_fn(n, d, |_, j| mean[j] + stddev * rng.standard_normal());
    ParticleCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn splits_are_distinct_and_stable() {
        let root = SeededRng::new(7);
        let mut s1 = root.split(1);
        let mut s1b = root.split(1);
        let mut s2 = root.split(2);
        let x = s1.next_u64();
        assert_eq!(x, s1b.next_u64());
        assert_ne!(x, s2.next_u64());
        assert_ne!(root.split(1).split(1).next_u64(), x);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = SeededRng::new(0);
        let cloud = gaussian_sample(&mut rng, 100_000, 1, &[0.0], 1.0).unwrap();
        let xs = cloud.points().as_slice();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn gaussian_reproducible() {
        let a = gaussian_sample(&mut SeededRng::new(9), 50, 3, &[1.0, 2.0, 3.0], 0.5).unwrap();
        let b = gaussian_sample(&mut SeededRng::new(9), 50, 3, &[1.0, 2.0, 3.0], 0.5).unwrap();
        assert_eq!(a.points().as_slice(), b.points().as_slice());
    }

    #[test]
    fn gaussian_rejects_bad_parameters() {
        let mut rng = SeededRng::new(0);
        assert!(matches!(
            gaussian_sample(&mut rng, 10, 1, &[0.0], 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(gaussian_sample(&mut rng, 0, 1, &[0.0], 1.0).is_err());
        assert!(gaussian_sample(&mut rng, 3, 2, &[0.0], 1.0).is_err());
    }

    #[test]
    fn permutation_is_bijection() {
        let mut p = SeededRng::new(1).permutation(20);
        p.sort_unstable();
        assert_eq!(p, (0..20).collect::<Vec<_>>());
    }
}
