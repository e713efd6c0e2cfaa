//! The output-side refinement network: a small residual MLP over the
//! K-dimensional logit vector, Y_O = Y_I + R(Y_I), with hand-rolled
//! forward/backward passes and an AdamW optimizer.
//!
//! Parameters live in one flat f64 vector so the optimizer, the
//! finite-difference checks, and the checkpoint format all see the same
//! thing. MLP layout: [W1 h×K, b1 h, W2 h×h, b2 h, W3 K×h, b3 K], row-major.
//! Linear layout: [W K×K, b K].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, kl_divergence, log_softmax, softmax, Matrix, SeededRng};

/// Default hidden width of the refinement MLP.
pub const DEFAULT_HIDDEN: usize = 512;

const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 4] = b"CRFR";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinerArch {
    Mlp,
    Linear,
}

impl RefinerArch {
    pub fn name(self) -> &'static str {
        match self {
            RefinerArch::Mlp => "mlp",
            RefinerArch::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(RefinerArch::Mlp),
            "linear" => Ok(RefinerArch::Linear),
            other => Err(Error::Config(format!(
                "unknown refiner arch {other:?} (expected \"mlp\" or \"linear\")"
            ))),
        }
    }
}

/// Refinement network. `residual = false` drops the skip connection so the
/// network's raw output replaces the logits instead of correcting them.
#[derive(Debug, Clone)]
pub struct Refiner {
    theta: Vec<f64>,
    k: usize,
    hidden: usize,
    arch: RefinerArch,
    residual: bool,
}

/// Activations saved by `forward` for the matching `backward` call.
#[derive(Debug)]
pub struct Cache {
    y_i: Matrix,
    z1: Matrix,
    z2: Matrix,
    fingerprint: u64,
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Refiner {
    /// Total parameter count for the given configuration.
    pub fn param_count(k: usize, hidden: usize, arch: RefinerArch) -> usize {
        match arch {
            RefinerArch::Mlp => hidden * k + hidden + hidden * hidden + hidden + k * hidden + k,
            RefinerArch::Linear => k * k + k,
        }
    }

    /// Fresh network: W1, W2 small random (std 0.02), every bias zero, and
    /// the final layer exactly zero so R(Y) = 0 and the refiner starts out
    /// as the identity map (for residual modes).
    pub fn init(
        rng: &mut SeededRng,
        k: usize,
        hidden: usize,
        arch: RefinerArch,
        residual: bool,
    ) -> Result<Self> {
        if k == 0 || hidden == 0 {
            return Err(Error::InvalidArgument(
                "refiner dimensions must be positive".into(),
            ));
        }
        let mut theta = vec![0.0; Self::param_count(k, hidden, arch)];
        if arch == RefinerArch::Mlp {
            for v in &mut theta[..hidden * k] {
                *v = rng.next_normal() * INIT_STD;
            }
            let w2_off = hidden * k + hidden;
            for v in &mut theta[w2_off..w2_off + hidden * hidden] {
                *v = rng.next_normal() * INIT_STD;
            }
        }
        Ok(Self {
            theta,
            k,
            hidden,
            arch,
            residual,
        })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn arch(&self) -> RefinerArch {
        self.arch
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    // Flat-layout offsets (MLP): W1 | b1 | W2 | b2 | W3 | b3.
    fn off_b1(&self) -> usize {
        self.hidden * self.k
    }
    fn off_w2(&self) -> usize {
        self.off_b1() + self.hidden
    }
    fn off_b2(&self) -> usize {
        self.off_w2() + self.hidden * self.hidden
    }
    fn off_w3(&self) -> usize {
        self.off_b2() + self.hidden
    }
    fn off_b3(&self) -> usize {
        self.off_w3() + self.k * self.hidden
    }

    fn fingerprint(&self) -> u64 {
        let dims = [
            self.k as u64,
            self.hidden as u64,
            matches!(self.arch, RefinerArch::Linear) as u64,
            self.residual as u64,
        ];
        fnv1a(
            dims.iter()
                .flat_map(|v| v.to_le_bytes())
                .chain(self.theta.iter().flat_map(|v| v.to_le_bytes())),
        )
    }

    /// Y_O = Y_I + R(Y_I) row-wise (or R(Y_I) alone without the residual),
    /// plus the activation cache for `backward`.
    pub fn forward(&self, y_i: &Matrix) -> Result<(Matrix, Cache)> {
        if y_i.cols() != self.k {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns but the refiner takes K = {}",
                y_i.cols(),
                self.k
            )));
        }
        if !y_i.is_finite() {
            return Err(Error::InvalidArgument(
                "refiner input has non-finite entries".into(),
            ));
        }
        let n = y_i.rows();
        let h = self.hidden;
        let mut y_o = Matrix::zeros(n, self.k);
        let (mut z1, mut z2) = match self.arch {
            RefinerArch::Mlp => (Matrix::zeros(n, h), Matrix::zeros(n, h)),
            RefinerArch::Linear => (Matrix::zeros(0, 0), Matrix::zeros(0, 0)),
        };

        for r in 0..n {
            let y = y_i.row(r);
            match self.arch {
                RefinerArch::Mlp => {
                    let w1 = &self.theta[..self.off_b1()];
                    let b1 = &self.theta[self.off_b1()..self.off_w2()];
                    let row_z1 = z1.row_mut(r);
                    for i in 0..h {
                        let mut a = b1[i];
                        for (j, &yj) in y.iter().enumerate() {
                            a += w1[i * self.k + j] * yj;
                        }
                        row_z1[i] = a.max(0.0);
                    }
                    let w2 = &self.theta[self.off_w2()..self.off_b2()];
                    let b2 = &self.theta[self.off_b2()..self.off_w3()];
                    {
                        let (z1_done, z2_rest) = (z1.row(r).to_vec(), z2.row_mut(r));
                        for i in 0..h {
                            let mut a = b2[i];
                            for (j, &zj) in z1_done.iter().enumerate() {
                                a += w2[i * h + j] * zj;
                            }
                            z2_rest[i] = a.max(0.0);
                        }
                    }
                    let w3 = &self.theta[self.off_w3()..self.off_b3()];
                    let b3 = &self.theta[self.off_b3()..];
                    let z2_row = z2.row(r);
                    let out = y_o.row_mut(r);
                    for c in 0..self.k {
                        let mut v = b3[c];
                        for (j, &zj) in z2_row.iter().enumerate() {
                            v += w3[c * h + j] * zj;
                        }
                        out[c] = if self.residual { y[c] + v } else { v };
                    }
                }
                RefinerArch::Linear => {
                    let w = &self.theta[..self.k * self.k];
                    let b = &self.theta[self.k * self.k..];
                    let out = y_o.row_mut(r);
                    for c in 0..self.k {
                        let mut v = b[c];
                        for (j, &yj) in y.iter().enumerate() {
                            v += w[c * self.k + j] * yj;
                        }
                        out[c] = if self.residual { y[c] + v } else { v };
                    }
                }
            }
        }

        let cache = Cache {
            y_i: y_i.clone(),
            z1,
            z2,
            fingerprint: self.fingerprint(),
        };
        Ok((y_o, cache))
    }

    /// Gradients of the scalar loss w.r.t. every parameter, flat in the same
    /// layout as `theta`, given ∂loss/∂Y_O. The upstream gradient already
    /// carries any batch-mean factor; backward only accumulates.
    pub fn backward(&self, cache: &Cache, grad_y_o: &Matrix) -> Result<Vec<f64>> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::InvalidArgument(
                "cache mismatch: the forward pass ran with different parameters".into(),
            ));
        }
        let n = cache.y_i.rows();
        if grad_y_o.rows() != n || grad_y_o.cols() != self.k {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient is {}x{} but Y_O was {}x{}",
                grad_y_o.rows(),
                grad_y_o.cols(),
                n,
                self.k
            )));
        }
        let h = self.hidden;
        let mut grad = vec![0.0; self.theta.len()];

        for r in 0..n {
            // With the residual connection ∂Y_O/∂R = I, so the upstream
            // gradient flows into R unchanged either way.
            let gr = grad_y_o.row(r);
            let y = cache.y_i.row(r);
            match self.arch {
                RefinerArch::Mlp => {
                    let z1 = cache.z1.row(r);
                    let z2 = cache.z2.row(r);
                    let w3 = &self.theta[self.off_w3()..self.off_b3()];
                    let w2 = &self.theta[self.off_w2()..self.off_b2()];

                    // W3, b3 and the gradient into z2.
                    let mut gz2 = vec![0.0; h];
                    {
                        let (gw3_all, rest) = grad[self.off_w3()..].split_at_mut(self.k * h);
                        let gb3 = &mut rest[..self.k];
                        for c in 0..self.k {
                            let g = gr[c];
                            gb3[c] += g;
                            if g != 0.0 {
                                for j in 0..h {
                                    gw3_all[c * h + j] += g * z2[j];
                                    gz2[j] += w3[c * h + j] * g;
                                }
                            }
                        }
                    }
                    // Through the second ReLU (derivative 0 at inactive units).
                    for (g, &z) in gz2.iter_mut().zip(z2) {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    // W2, b2 and the gradient into z1.
                    let mut gz1 = vec![0.0; h];
                    {
                        let (gw2_all, rest) = grad[self.off_w2()..].split_at_mut(h * h);
                        let gb2 = &mut rest[..h];
                        for i in 0..h {
                            let g = gz2[i];
                            gb2[i] += g;
                            if g != 0.0 {
                                for j in 0..h {
                                    gw2_all[i * h + j] += g * z1[j];
                                    gz1[j] += w2[i * h + j] * g;
                                }
                            }
                        }
                    }
                    for (g, &z) in gz1.iter_mut().zip(z1) {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    // W1, b1.
                    let (gw1_all, rest) = grad.split_at_mut(self.off_b1());
                    let gb1 = &mut rest[..h];
                    for i in 0..h {
                        let g = gz1[i];
                        gb1[i] += g;
                        if g != 0.0 {
                            for (j, &yj) in y.iter().enumerate() {
                                gw1_all[i * self.k + j] += g * yj;
                            }
                        }
                    }
                }
                RefinerArch::Linear => {
                    let (gw, gb) = grad.split_at_mut(self.k * self.k);
                    for c in 0..self.k {
                        let g = gr[c];
                        gb[c] += g;
                        if g != 0.0 {
                            for (j, &yj) in y.iter().enumerate() {
                                gw[c * self.k + j] += g * yj;
                            }
                        }
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Writes the checkpoint: magic "CRFR", version, K, h, mode word
    /// (bit 0: 1 = linear arch, bit 1: 1 = residual), parameter count, then
    /// the flat parameters as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(24 + self.theta.len() * 8);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.k as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        let mode = matches!(self.arch, RefinerArch::Linear) as u32 | (self.residual as u32) << 1;
        bytes.extend_from_slice(&mode.to_le_bytes());
        bytes.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for v in &self.theta {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format(format!(
                    "checkpoint truncated at byte {} (wanted {n} more)",
                    *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic (expected CRFR)".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let k = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let hidden = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mode = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if mode > 3 {
            return Err(Error::Format(format!("invalid checkpoint mode {mode}")));
        }
        let arch = if mode & 1 == 1 {
            RefinerArch::Linear
        } else {
            RefinerArch::Mlp
        };
        let residual = mode & 2 != 0;
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        if count != Self::param_count(k, hidden, arch) {
            return Err(Error::Format(format!(
                "checkpoint declares {count} parameters but K={k} h={hidden} implies {}",
                Self::param_count(k, hidden, arch)
            )));
        }
        let mut theta = Vec::with_capacity(count);
        for _ in 0..count {
            theta.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        Ok(Self {
            theta,
            k,
            hidden,
            arch,
            residual,
        })
    }
}

/// L_O = CE(Y_O, labels) + λ_O · KL(Y_O ‖ Y_I), mean over rows, plus its
/// exact gradient w.r.t. Y_O (Y_I is treated as a constant).
pub fn refine_loss(
    y_o: &Matrix,
    y_i: &Matrix,
    labels: &[usize],
    lambda_o: f64,
) -> Result<(f64, Matrix)> {
    if y_o.rows() != y_i.rows() || y_o.cols() != y_i.cols() {
        return Err(Error::ShapeMismatch(format!(
            "refine_loss: Y_O is {}x{} but Y_I is {}x{}",
            y_o.rows(),
            y_o.cols(),
            y_i.rows(),
            y_i.cols()
        )));
    }
    let n = y_o.rows();
    let k = y_o.cols();
    let ce = cross_entropy(y_o, labels)?;
    let kl = if lambda_o != 0.0 {
        kl_divergence(y_o, y_i)?
    } else {
        0.0
    };
    let loss = ce + lambda_o * kl;

    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, k);
    for r in 0..n {
        let p = softmax(y_o.row(r))?;
        let g = grad.row_mut(r);
        // CE term: (softmax − onehot) / N.
        for c in 0..k {
            g[c] = p[c] * inv_n;
        }
        g[labels[r]] -= inv_n;
        if lambda_o != 0.0 {
            // KL term: ∂KL/∂y_j = p_j·((s_j − t_j) − KL_row) with
            // s = log_softmax(Y_O row), t = log_softmax(Y_I row).
            let s = log_softmax(y_o.row(r))?;
            let t = log_softmax(y_i.row(r))?;
            let kl_row: f64 = (0..k).map(|c| p[c] * (s[c] - t[c])).sum();
            for c in 0..k {
                g[c] += lambda_o * inv_n * p[c] * ((s[c] - t[c]) - kl_row);
            }
        }
    }
    Ok((loss, grad))
}

/// Decoupled-weight-decay Adam over one flat parameter vector:
/// θ ← θ·(1 − lr·wd), then the bias-corrected Adam step
/// θ ← θ − lr·m̂/(√v̂ + ε).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    /// Standard defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8, weight decay 0.01.
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adamw sized for {} parameters, got theta {} / grad {}",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            theta[i] *= 1.0 - self.lr * self.weight_decay;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
