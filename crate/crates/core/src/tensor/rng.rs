use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};

/// Deterministic random stream. ChaCha output is platform independent, and
/// normals come from Box-Muller rather than a library sampler so the
/// sequence is fixed by this code alone.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream derived from this seed and a label.
    pub fn derive(seed: u64, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self::new(seed ^ h.rotate_left(17))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.gen::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let mut u1 = self.uniform();
        while u1 <= f64::MIN_POSITIVE {
            u1 = self.uniform();
        }
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Normal-initialised tensor with the given standard deviation.
    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = T::of(self.normal() * std);
        }
        t
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = T::of(lo + (hi - lo) * self.uniform());
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_uniform_in_range() {
        let u = SeededRng::new(0).uniform();
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(99);
        let mut b = SeededRng::new(99);
        for _ in 0..1000 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn normal_mean_near_zero() {
        let mut r = SeededRng::new(5);
        let n = 100_000;
        let mean = (0..n).map(|_| r.normal()).sum::<f64>() / n as f64;
        // standard error is 1/sqrt(1e5) ~ 0.0032
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = SeededRng::new(1);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut s = v.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
