use super::matrix::Matrix;

/// Deterministic random stream with a fixed, self-contained algorithm.
///
/// The generator is SplitMix64 (Steele, Lea & Flood 2014): a 64-bit counter
/// advanced by the golden-gamma constant and scrambled by two xor-shift
/// multiplies. Uniform doubles take the top 53 bits of the output; normal
/// deviates come from the polar Box-Muller transform with the spare value
/// cached. None of this is delegated to an external crate on purpose: the
/// exact stream is part of the on-disk artifacts (tasks, surrogate weights,
/// projections), so it must never drift with a dependency upgrade.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    state: u64,
    spare_normal: Option<f64>,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            state: seed,
            spare_normal: None,
        }
    }

    /// Independent child stream; children of distinct `index` values do not
    /// overlap in practice because the seed is re-scrambled before use.
    pub fn child(&self, index: u64) -> SeededRng {
        SeededRng::new(mix_seed(self.seed, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound). Rejection-free modulo is fine here:
    /// bounds are tiny (class counts, permutation shifts) so the bias is
    /// far below anything observable.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below(0)");
        self.next_u64() % bound
    }

    /// Standard normal deviate, polar Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        loop {
            let x = 2.0 * self.next_f64() - 1.0;
            let y = 2.0 * self.next_f64() - 1.0;
            let s = x * x + y * y;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(y * f);
                return x * f;
            }
        }
    }

    /// Fills a vector with i.i.d. N(0, std^2) entries.
    pub fn normal_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| std * self.next_normal()).collect()
    }

    /// Deterministic Fisher-Yates shuffle of index order.
    pub fn shuffled_indices(&mut self, len: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            idx.swap(i, j);
        }
        idx
    }
}

/// Derives a child seed; used wherever independent streams are needed
/// (per-column projections, per-attempt task calibration, model weights).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Matrix with i.i.d. N(0, std^2) entries filled in row-major order.
pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Matrix {
    assert!(std >= 0.0, "negative standard deviation");
    let data = rng.normal_vec(rows * cols, std);
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
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
        assert_eq!(a.next_normal(), b.next_normal());
    }

    #[test]
    fn gaussian_matrix_deterministic() {
        let m1 = gaussian_matrix(&mut SeededRng::new(7), 5, 4, 0.02);
        let m2 = gaussian_matrix(&mut SeededRng::new(7), 5, 4, 0.02);
        assert_eq!(m1, m2);
    }

    #[test]
    fn gaussian_matrix_zero_std_is_zero() {
        let m = gaussian_matrix(&mut SeededRng::new(3), 4, 4, 0.0);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_sample_std_close_to_requested() {
        // 10^6 draws at std 0.02: sample std must land in [0.0197, 0.0203].
        let mut rng = SeededRng::new(123);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v = 0.02 * rng.next_normal();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!(
            (0.0197..=0.0203).contains(&std),
            "sample std {std} out of range"
        );
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = SeededRng::new(99);
        for _ in 0..10_000 {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn children_differ_from_parent_and_each_other() {
        let rng = SeededRng::new(5);
        let mut c0 = rng.child(0);
        let mut c1 = rng.child(1);
        assert_ne!(c0.next_u64(), c1.next_u64());
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = SeededRng::new(11);
        let mut idx = rng.shuffled_indices(50);
        idx.sort_unstable();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
    }
}
