//! Seeded random source.
//!
//! The bit stream is ChaCha8 (portable, identical on every platform for a
//! given seed). Normals use the Box–Muller transform of two uniforms:
//! `r = sqrt(-2 ln u1)`, `z0 = r cos(2 pi u2)`, `z1 = r sin(2 pi u2)` with
//! `u1 in (0, 1]`, `u2 in [0, 1)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{invalid, Result};

use super::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Everything needed to resume a stream exactly where it left off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng::with_stream(seed, 0)
    }

    /// Independent stream for the same seed, e.g. one per pipeline purpose.
    pub fn with_stream(seed: u64, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Rng {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, a: f64, b: f64) -> Result<f64> {
        if !(a < b) {
            return Err(invalid(format!("uniform({a}, {b}) needs a < b")));
        }
        Ok(a + (b - a) * self.uniform())
    }

    fn box_muller(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// One standard normal draw (the second Box–Muller value is discarded).
    pub fn normal(&mut self) -> f64 {
        self.box_muller().0
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let (z0, z1) = self.box_muller();
            out.push(z0);
            out.push(z1);
        }
        out.truncate(n);
        out
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(self.normal_vec(n), shape).expect("length matches shape")
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], a: f64, b: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.uniform_range(a, b)).collect::<Result<Vec<_>>>()?;
        Tensor::new(data, shape)
    }

    /// Unbiased integer in `[0, n)` (multiply-shift with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Uniformly random permutation of `0..n` (Fisher–Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_mode;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        let xa: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(Rng::with_stream(7, 1).next_u64(), Rng::new(7).next_u64());
    }

    #[test]
    fn normal_moments() {
        let _g = check_mode();
        let mut rng = Rng::new(1);
        let z = rng.normal_vec(1_000_000);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn permutation_covers_each_index_once() {
        let mut rng = Rng::new(3);
        let mut p = rng.permutation(4);
        p.sort();
        assert_eq!(p, vec![0, 1, 2, 3]);
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut rng = Rng::with_stream(11, 4);
        for _ in 0..37 {
            rng.next_u64();
        }
        let mut resumed = Rng::from_state(rng.state());
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), resumed.next_u64());
        }
    }

    #[test]
    fn uniform_range_rejects_empty_interval() {
        assert!(Rng::new(0).uniform_range(1.0, 1.0).is_err());
        let mut rng = Rng::new(0);
        for _ in 0..1000 {
            let v = rng.uniform_range(0.1, 0.2).unwrap();
            assert!((0.1..0.2).contains(&v));
        }
    }
}
