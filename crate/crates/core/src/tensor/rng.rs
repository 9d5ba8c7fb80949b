use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::Tensor;

/// Deterministic counter-based generator.
///
/// Each `(seed, stream)` pair selects an independent ChaCha20 keystream, so
/// clients, the server and every pad channel draw from disjoint sequences
/// that are reproducible regardless of execution order.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A generator seeded from this one's output, on the same stream id.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.gen(), self.stream)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.inner.gen::<f64>();
        let u2 = self.inner.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// I.i.d. uniform entries on `[-scale, scale)`.
    pub fn uniform_tensor(&mut self, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform(-scale, scale)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let a = Rng::new(11, 4).uniform_tensor(&[3, 3], 1.0);
        let b = Rng::new(11, 4).uniform_tensor(&[3, 3], 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_independent() {
        let a = Rng::new(11, 4).uniform_tensor(&[8], 1.0);
        let b = Rng::new(11, 5).uniform_tensor(&[8], 1.0);
        assert_ne!(a, b);
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = Rng::new(1, 0);
        let xs: Vec<f64> = (0..20_000).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }
}
