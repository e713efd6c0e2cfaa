//! Covariance Matrix Adaptation Evolution Strategy with the standard
//! parameterization: rank-based recombination weights, cumulative step-size
//! adaptation (CSA), and rank-1 + rank-μ covariance updates.
//!
//! Minimization, ask/tell interface. `ask` draws λ candidates from
//! N(m, σ²·C); `tell` consumes their fitnesses and updates m, σ, C, and the
//! two evolution paths. The state is single-owner mutable: ask/tell must be
//! serialized, while fitness evaluation between them may run concurrently as
//! long as results come back in sample-index order.

use crate::error::{Error, Result};
use crate::numerics::{norm, sym_eigen, Matrix, SeededRng};

const SIGMA_MIN: f64 = 1e-12;
const SIGMA_MAX: f64 = 1e12;

#[derive(Debug, Clone)]
struct EigenCache {
    /// Eigenvector columns B of C = B·diag(D)·Bᵀ.
    vectors: Matrix,
    /// √D, with round-off negatives already clamped to zero.
    sqrt_values: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Pending {
    /// The standard-normal draws u_i behind the last ask; kept so the
    /// step-size path can use C^{-1/2}·(z_i−m)/σ = B·u_i without ever
    /// forming C^{-1/2}.
    us: Vec<Vec<f64>>,
    /// The candidates handed out, for verifying the tell round-trip.
    zs: Vec<Vec<f64>>,
}

/// Full distribution state plus derived strategy constants. Fields are
/// public for inspection; mutate them outside of `tell` only in tests.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub m: Vec<f64>,
    pub sigma: f64,
    pub c: Matrix,
    pub p_sigma: Vec<f64>,
    pub p_c: Vec<f64>,
    pub generation: u64,
    pub lambda: usize,
    /// μ = ⌊λ/2⌋ parents used for recombination.
    pub mu: usize,
    /// w_i ∝ ln(μ+0.5) − ln i, normalized to sum 1.
    pub weights: Vec<f64>,
    /// μ_eff = 1 / Σ w_i² (variance-effective selection mass).
    pub mu_eff: f64,
    /// c_σ = (μ_eff + 2) / (d0 + μ_eff + 5)
    pub c_sigma: f64,
    /// d_σ = 1 + 2·max(0, √((μ_eff−1)/(d0+1)) − 1) + c_σ
    pub d_sigma: f64,
    /// c_c = (4 + μ_eff/d0) / (d0 + 4 + 2·μ_eff/d0)
    pub c_c: f64,
    /// c₁ = 2 / ((d0 + 1.3)² + μ_eff)
    pub c1: f64,
    /// c_μ = min(1 − c₁, 2·(μ_eff − 2 + 1/μ_eff) / ((d0 + 2)² + μ_eff))
    pub c_mu: f64,
    /// E‖N(0,I)‖ ≈ √d0·(1 − 1/(4·d0) + 1/(21·d0²))
    pub chi_n: f64,

    best: Option<(f64, Vec<f64>)>,
    eigen: Option<EigenCache>,
    tells_since_eigen: u64,
    pending: Option<Pending>,
}

impl SearchState {
    /// Fresh state: C = I, evolution paths zero, generation 0, strategy
    /// constants from the closed forms above.
    pub fn init(d0: usize, m0: Vec<f64>, sigma0: f64, lambda: usize) -> Result<Self> {
        if d0 == 0 {
            return Err(Error::InvalidArgument("d0 must be positive".into()));
        }
        if m0.len() != d0 {
            return Err(Error::ShapeMismatch(format!(
                "m0 has length {} but d0 = {d0}",
                m0.len()
            )));
        }
        if !(sigma0 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma0 must be positive, got {sigma0}"
            )));
        }
        if lambda < 4 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be at least 4 (got {lambda}); fewer makes the recombination weights degenerate"
            )));
        }

        let n = d0 as f64;
        let mu = lambda / 2;
        let mut weights: Vec<f64> = (1..=mu)
            .map(|i| ((mu as f64) + 0.5).ln() - (i as f64).ln())
            .collect();
        let w_sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= w_sum;
        }
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma =
            1.0 + 2.0 * f64::max(0.0, ((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c1 = 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff);
        let c_mu = f64::min(
            1.0 - c1,
            2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) * (n + 2.0) + mu_eff),
        );
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        Ok(Self {
            m: m0,
            sigma: sigma0,
            c: Matrix::identity(d0),
            p_sigma: vec![0.0; d0],
            p_c: vec![0.0; d0],
            generation: 0,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c1,
            c_mu,
            chi_n,
            best: None,
            eigen: None,
            tells_since_eigen: 0,
            pending: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Current distribution mean — the deployed solution, since the
    /// expectation of an affine map of the search Gaussian is its mean image.
    pub fn mean(&self) -> &[f64] {
        &self.m
    }

    /// Lowest fitness seen so far and the candidate that achieved it.
    pub fn best(&self) -> Option<(f64, &[f64])> {
        self.best.as_ref().map(|(f, z)| (*f, z.as_slice()))
    }

    /// How many tells may pass before the eigendecomposition of C is
    /// refreshed: every generation at small d0, every ⌈d0/10⌉ above 64 to
    /// keep the O(d0³) cost amortized.
    fn eigen_interval(&self) -> u64 {
        let d0 = self.dim();
        if d0 <= 64 {
            1
        } else {
            d0.div_ceil(10) as u64
        }
    }

    fn refresh_eigen_if_stale(&mut self) -> Result<()> {
        if self.eigen.is_some() && self.tells_since_eigen < self.eigen_interval() {
            return Ok(());
        }
        let eig = sym_eigen(&self.c)?;
        self.eigen = Some(EigenCache {
            vectors: eig.vectors,
            sqrt_values: eig.values.iter().map(|v| v.sqrt()).collect(),
        });
        self.tells_since_eigen = 0;
        Ok(())
    }

    /// Samples λ candidates z_i = m + σ·B·diag(√D)·u_i with u_i ~ N(0, I).
    ///
    /// Read-only on the distribution parameters (m, σ, C); only the eigen
    /// cache and the pending bookkeeping for the next tell are touched.
    pub fn ask(&mut self, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
        self.refresh_eigen_if_stale()?;
        let cache = self.eigen.as_ref().expect("eigen cache just refreshed");
        let d0 = self.dim();

        let mut us = Vec::with_capacity(self.lambda);
        let mut zs = Vec::with_capacity(self.lambda);
        for _ in 0..self.lambda {
            let u = rng.normal_vec(d0, 1.0);
            let mut z = self.m.clone();
            // B·(√D ∘ u), accumulated column by column.
            for (j, (&uj, &sq)) in u.iter().zip(&cache.sqrt_values).enumerate() {
                let scale = self.sigma * sq * uj;
                if scale != 0.0 {
                    for i in 0..d0 {
                        z[i] += scale * cache.vectors[(i, j)];
                    }
                }
            }
            us.push(u);
            zs.push(z);
        }
        self.pending = Some(Pending { us, zs: zs.clone() });
        Ok(zs)
    }

    /// Consumes fitnesses for the last asked population (minimization).
    ///
    /// Ranking is ascending by fitness with ties broken by sample index
    /// (stable sort), so any strictly increasing transform of the fitnesses
    /// produces the identical update.
    pub fn tell(&mut self, solutions: &[Vec<f64>], fitnesses: &[f64]) -> Result<()> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| Error::InvalidArgument("tell called without a preceding ask".into()))?;
        if solutions.len() != self.lambda || fitnesses.len() != self.lambda {
            return Err(Error::ShapeMismatch(format!(
                "expected {} solutions and fitnesses, got {} and {}",
                self.lambda,
                solutions.len(),
                fitnesses.len()
            )));
        }
        if fitnesses.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFiniteFitness);
        }
        if solutions != pending.zs {
            return Err(Error::InvalidArgument(
                "solutions do not match the last ask (deliver them unchanged, in sample-index order)".into(),
            ));
        }

        let d0 = self.dim();
        let n = d0 as f64;

        // 1. Rank ascending; stable sort keeps sample-index order on ties.
        let mut order: Vec<usize> = (0..self.lambda).collect();
        order.sort_by(|&a, &b| fitnesses[a].partial_cmp(&fitnesses[b]).unwrap());

        // 2. Best-so-far record.
        let head = order[0];
        if self.best.as_ref().is_none_or(|(f, _)| fitnesses[head] < *f) {
            self.best = Some((fitnesses[head], solutions[head].clone()));
        }

        // 3. Recombine the best μ: m' = Σ w_i z_(i).
        let m_old = std::mem::replace(&mut self.m, vec![0.0; d0]);
        for (w_idx, &sol_idx) in order[..self.mu].iter().enumerate() {
            let w = self.weights[w_idx];
            for (mi, &zi) in self.m.iter_mut().zip(&solutions[sol_idx]) {
                *mi += w * zi;
            }
        }

        // ⟨y⟩_w = (m' − m)/σ and ⟨u⟩_w over the same parents.
        let y_w: Vec<f64> = self
            .m
            .iter()
            .zip(&m_old)
            .map(|(new, old)| (new - old) / self.sigma)
            .collect();
        let mut u_w = vec![0.0; d0];
        for (w_idx, &sol_idx) in order[..self.mu].iter().enumerate() {
            let w = self.weights[w_idx];
            for (ui, &uv) in u_w.iter_mut().zip(&pending.us[sol_idx]) {
                *ui += w * uv;
            }
        }

        // 4. Step-size path: p_σ ← (1−c_σ)·p_σ + √(c_σ(2−c_σ)μ_eff)·B·⟨u⟩_w,
        //    where B·⟨u⟩_w = C^{-1/2}·⟨y⟩_w by construction of the samples.
        let cache = self.eigen.as_ref().expect("cache exists after ask");
        let mut bu = vec![0.0; d0];
        for (j, &uj) in u_w.iter().enumerate() {
            if uj != 0.0 {
                for i in 0..d0 {
                    bu[i] += cache.vectors[(i, j)] * uj;
                }
            }
        }
        let cs_norm = (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt();
        for (p, &b) in self.p_sigma.iter_mut().zip(&bu) {
            *p = (1.0 - self.c_sigma) * *p + cs_norm * b;
        }

        // 5. Stall indicator: h_σ = 1 unless ‖p_σ‖ blew up, which would let a
        //    long p_c spike distort C during fast σ changes.
        let t1 = self.generation + 1;
        let ps_norm = norm(&self.p_sigma);
        let denom = (1.0 - (1.0 - self.c_sigma).powi(2 * t1 as i32)).sqrt();
        let h_sigma = if ps_norm / denom < (1.4 + 2.0 / (n + 1.0)) * self.chi_n {
            1.0
        } else {
            0.0
        };

        // 6. Covariance path: p_c ← (1−c_c)·p_c + h_σ·√(c_c(2−c_c)μ_eff)·⟨y⟩_w.
        let cc_norm = (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt();
        for (p, &y) in self.p_c.iter_mut().zip(&y_w) {
            *p = (1.0 - self.c_c) * *p + h_sigma * cc_norm * y;
        }

        // 7. Covariance update:
        //    C ← (1−c₁−c_μ)·C + c₁·(p_c·p_cᵀ + (1−h_σ)·c_c(2−c_c)·C)
        //        + c_μ·Σ w_i·y_(i)·y_(i)ᵀ.
        let decay =
            1.0 - self.c1 - self.c_mu + self.c1 * (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c);
        for v in self.c.data_mut() {
            *v *= decay;
        }
        for i in 0..d0 {
            for j in 0..d0 {
                self.c[(i, j)] += self.c1 * self.p_c[i] * self.p_c[j];
            }
        }
        for (w_idx, &sol_idx) in order[..self.mu].iter().enumerate() {
            let w = self.c_mu * self.weights[w_idx];
            let z = &solutions[sol_idx];
            for i in 0..d0 {
                let yi = (z[i] - m_old[i]) / self.sigma;
                for j in 0..d0 {
                    let yj = (z[j] - m_old[j]) / self.sigma;
                    self.c[(i, j)] += w * yi * yj;
                }
            }
        }
        // Keep C exactly symmetric against drift.
        for i in 0..d0 {
            for j in (i + 1)..d0 {
                let avg = 0.5 * (self.c[(i, j)] + self.c[(j, i)]);
                self.c[(i, j)] = avg;
                self.c[(j, i)] = avg;
            }
        }

        // 8. Step size: σ ← σ·exp((c_σ/d_σ)·(‖p_σ‖/χ_n − 1)).
        self.sigma *= ((self.c_sigma / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();
        if !(SIGMA_MIN..=SIGMA_MAX).contains(&self.sigma) {
            return Err(Error::StepSizeDiverged(self.sigma));
        }

        self.generation += 1;
        self.tells_since_eigen += 1;
        Ok(())
    }
}

/// Standard test functions for exercising the optimizer (both minimized at
/// the all-ones vector).
pub mod testfn {
    /// ‖z − 1‖²: convex quadratic.
    pub fn sphere(z: &[f64]) -> f64 {
        z.iter().map(|&v| (v - 1.0) * (v - 1.0)).sum()
    }

    /// Σ 100·(z_{i+1} − z_i²)² + (1 − z_i)²: curved narrow valley.
    pub fn rosenbrock(z: &[f64]) -> f64 {
        let mut sum = 0.0;
        for i in 0..z.len().saturating_sub(1) {
            let a = z[i + 1] - z[i] * z[i];
            let b = 1.0 - z[i];
            sum += 100.0 * a * a + b * b;
        }
        sum
    }
}
