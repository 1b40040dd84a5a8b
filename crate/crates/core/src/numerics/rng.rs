use ndarray::Array2;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::Real;

/// Seeded, platform-independent generator. Identical seeds yield identical
/// draw sequences.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and a label.
    /// Does not advance `self`.
    pub fn derive(&self, label: &str) -> Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(label.as_bytes());
        let d = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&d[..8]);
        Rng::new(u64::from_le_bytes(b))
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn fill_bytes(&mut self, buf: &mut [u8]) {
        self.inner.fill_bytes(buf)
    }

    pub fn normal_matrix<T: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<T> {
        let v: Vec<T> = (&mut self.inner)
            .sample_iter(StandardNormal)
            .take(rows * cols)
            .map(|x: f64| T::of(x * std))
            .collect();
        Array2::from_shape_vec((rows, cols), v).expect("length matches shape")
    }

    pub fn uniform_matrix<T: Real>(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<T> {
        Array2::from_shape_fn((rows, cols), |_| T::of(lo + (hi - lo) * self.uniform()))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}
