use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::Matrix;

/// Seeded generator used for every random draw in the crate.
///
/// The integer stream is ChaCha8 keyed by `seed_from_u64`, which is fixed by
/// the `rand_core` contract and identical on every platform. Uniforms take the
/// top 53 bits of each `u64`; normals come from the Box–Muller transform and
/// are produced in pairs, with the spare cached for the next call.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer on `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        self.standard_normal() * std
    }

    /// A `rows × cols` matrix of i.i.d. `N(0, std²)` draws in row-major order.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        assert!(std >= 0.0, "std must be non-negative");
        let data = (0..rows * cols).map(|_| self.normal(std)).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `seeded_normal` in functional form.
pub fn seeded_normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    rng.normal_matrix(rows, cols, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_gives_zeros() {
        let m = seeded_normal(&mut Rng::new(1), 3, 4, 0.0);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = seeded_normal(&mut Rng::new(3927), 6, 7, 1.3);
        let b = seeded_normal(&mut Rng::new(3927), 6, 7, 1.3);
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = seeded_normal(&mut Rng::new(3928), 6, 7, 1.3);
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn moments_of_large_sample() {
        let m = seeded_normal(&mut Rng::new(42), 1, 100_000, 1.0);
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(9);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn integer_stream_is_pinned() {
        // ChaCha8 keyed via seed_from_u64 must not drift between builds.
        let mut a = Rng::new(0);
        let first: Vec<u64> = (0..3).map(|_| a.next_u64()).collect();
        assert_eq!(
            first,
            [
                13080132717333068652,
                8594738769458413623,
                12896916468484187878
            ]
        );
    }
}
