use num_complex::Complex64;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::CMatrix;

/// Seeded random source. ChaCha8 keeps draws identical across platforms.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
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

    /// Independent sub-stream keyed by `id`. Does not advance `self`.
    pub fn derive(&self, id: u64) -> Rng {
        Self::with_stream(self.seed, splitmix(self.stream ^ splitmix(id.wrapping_add(1))))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Circularly-symmetric complex Gaussian with total variance `var`.
    pub fn complex_normal(&mut self, var: f64) -> Complex64 {
        let s = (var / 2.0).sqrt();
        let re = self.standard_normal() * s;
        let im = self.standard_normal() * s;
        Complex64::new(re, im)
    }

    pub fn complex_normal_matrix(&mut self, rows: usize, cols: usize, var: f64) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| self.complex_normal(var))
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| Complex64::new(self.uniform(lo, hi), 0.0))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }
}
