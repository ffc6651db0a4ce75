//! Deterministic random number generation.
//!
//! Everything random in this crate flows through [`DetRng`]: a ChaCha8 stream
//! cipher keyed by a 64-bit seed plus a 64-bit stream id. Uniform doubles are
//! derived from the top 53 bits of each 64-bit block and normal deviates use
//! the Box-Muller transform, so the full generator stack is specified by this
//! file alone and any run is reproducible from `(seed, stream)`.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct DetRng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Independent generator for a named sub-purpose of the same seed.
    pub fn stream(&self, stream: u64) -> DetRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        DetRng {
            inner,
            seed: self.seed,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let i = (self.uniform() * n as f64) as usize;
        i.min(n - 1)
    }

    /// Standard normal via Box-Muller on two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.range(lo, hi)))
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], mean: f64, sd: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(mean + sd * self.normal()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = DetRng::new(42);
        let mut b = DetRng::new(42);
        for _ in 0..32 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_independent_but_deterministic() {
        let root = DetRng::new(7);
        let mut s1 = root.stream(1);
        let mut s1b = root.stream(1);
        let mut s2 = root.stream(2);
        let x1 = s1.next_u64();
        assert_eq!(x1, s1b.next_u64());
        assert_ne!(x1, s2.next_u64());
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let mut rng = DetRng::new(3);
        for _ in 0..1000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_has_sane_moments() {
        let mut rng = DetRng::new(11);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
