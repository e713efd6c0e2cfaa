//! The built-in frozen model behind the in-process oracle and the service.
//!
//! Structure: a frozen affine input adapter takes a flattened prompt sequence
//! to a hidden width h, a chain of residual blocks x ← x + tanh(W·x + b)
//! transforms it, and a frozen affine output adapter produces a class weight
//! vector in feature space. Logits are cosine similarity between image
//! features and class weights, scaled by `logit_scale`, then passed through a
//! fixed K×K column-mixing "corruption" (identity when disabled) that gives
//! the output-side refiner something real to undo.

use crate::error::{Error, Result};
use crate::numerics::{dot, mix_seed, norm, Matrix, SeededRng};

const DEFAULT_HIDDEN: usize = 64;
const DEFAULT_BLOCKS: usize = 3;
const DEFAULT_LOGIT_SCALE: f64 = 100.0;

/// Construction parameters for [`SurrogateModel`]. Everything is derived
/// deterministically from `seed` and the dimensions.
#[derive(Debug, Clone)]
pub struct SurrogateParams {
    pub seed: u64,
    /// Rows per prompt sequence (prompt length n plus one class row).
    pub seq_len: usize,
    /// Embedding dimension d of each row.
    pub embed_dim: usize,
    /// Hidden width h of the residual chain.
    pub hidden: usize,
    /// Number of residual blocks.
    pub blocks: usize,
    /// Image feature dimension D_f.
    pub feat_dim: usize,
    /// Number of classes K (fixes the corruption shape).
    pub classes: usize,
    pub logit_scale: f64,
    /// None = identity (no corruption).
    pub corruption: Option<Matrix>,
}

impl SurrogateParams {
    pub fn new(
        seed: u64,
        seq_len: usize,
        embed_dim: usize,
        feat_dim: usize,
        classes: usize,
    ) -> Self {
        Self {
            seed,
            seq_len,
            embed_dim,
            hidden: DEFAULT_HIDDEN,
            blocks: DEFAULT_BLOCKS,
            feat_dim,
            classes,
            logit_scale: DEFAULT_LOGIT_SCALE,
            corruption: None,
        }
    }
}

/// Frozen surrogate model. All weights are fixed at construction and the
/// forward pass is deterministic, so two models built from the same params
/// are bitwise interchangeable.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    input_w: Matrix, // h × in_dim
    input_b: Vec<f64>,
    blocks: Vec<(Matrix, Vec<f64>)>, // h×h each
    output_w: Matrix,                // D_f × h
    output_b: Vec<f64>,
    logit_scale: f64,
    corruption: Matrix, // K×K
    in_dim: usize,
    hidden: usize,
    feat_dim: usize,
    classes: usize,
    seed: u64,
}

/// Affine layer init: weights N(0, 1/√fan_in), biases N(0, 0.1).
fn affine_init(rng: &mut SeededRng, out_dim: usize, in_dim: usize) -> (Matrix, Vec<f64>) {
    let w_std = 1.0 / (in_dim as f64).sqrt();
    let mut w = Matrix::zeros(out_dim, in_dim);
    for v in w.data_mut() {
        *v = rng.next_normal() * w_std;
    }
    let b = rng.normal_vec(out_dim, 0.1);
    (w, b)
}

fn affine(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = w.matvec(x).expect("affine shape fixed at construction");
    for (o, &bv) in out.iter_mut().zip(b) {
        *o += bv;
    }
    out
}

impl SurrogateModel {
    pub fn new(params: &SurrogateParams) -> Result<Self> {
        if params.seq_len == 0
            || params.embed_dim == 0
            || params.hidden == 0
            || params.feat_dim == 0
            || params.classes == 0
        {
            return Err(Error::InvalidArgument(
                "surrogate dimensions must be positive".into(),
            ));
        }
        if !(params.logit_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "logit_scale must be positive, got {}",
                params.logit_scale
            )));
        }
        let in_dim = params.seq_len * params.embed_dim;
        let corruption = match &params.corruption {
            Some(m) => {
                if m.rows() != params.classes || m.cols() != params.classes {
                    return Err(Error::ShapeMismatch(format!(
                        "corruption is {}x{} but K = {}",
                        m.rows(),
                        m.cols(),
                        params.classes
                    )));
                }
                m.clone()
            }
            None => Matrix::identity(params.classes),
        };

        // One independent stream per layer so layer shapes never shift each
        // other's draws.
        let mut in_rng = SeededRng::new(mix_seed(params.seed, 1));
        let (input_w, input_b) = affine_init(&mut in_rng, params.hidden, in_dim);
        let mut blocks = Vec::with_capacity(params.blocks);
        for i in 0..params.blocks {
            let mut rng = SeededRng::new(mix_seed(params.seed, 100 + i as u64));
            blocks.push(affine_init(&mut rng, params.hidden, params.hidden));
        }
        let mut out_rng = SeededRng::new(mix_seed(params.seed, 2));
        let (output_w, output_b) = affine_init(&mut out_rng, params.feat_dim, params.hidden);

        Ok(Self {
            input_w,
            input_b,
            blocks,
            output_w,
            output_b,
            logit_scale: params.logit_scale,
            corruption,
            in_dim,
            hidden: params.hidden,
            feat_dim: params.feat_dim,
            classes: params.classes,
            seed: params.seed,
        })
    }

    /// Flattened prompt length the model accepts: (n+1)·d.
    pub fn input_dim(&self) -> usize {
        self.in_dim
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn corruption(&self) -> &Matrix {
        &self.corruption
    }

    fn block_f(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let (w, b) = &self.blocks[i];
        let mut out = affine(w, b, x);
        for v in &mut out {
            *v = v.tanh();
        }
        out
    }

    /// Runs the residual chain and also returns each block's contribution:
    /// the returned `final` equals input + Σ parts by construction.
    ///
    /// Test-only window into the model internals — not part of the oracle
    /// contract, which exposes predictions and nothing else.
    pub fn decompose_chain(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut state = x.to_vec();
        let mut parts = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let part = self.block_f(i, &state);
            for (s, p) in state.iter_mut().zip(&part) {
                *s += p;
            }
            parts.push(part);
        }
        (state, parts)
    }

    /// Encodes one (n+1)×d prompt sequence into a class weight vector in
    /// feature space: output_adapter(residual_chain(input_adapter(flatten(t)))).
    pub fn text_encode(&self, prompt: &Matrix) -> Result<Vec<f64>> {
        if prompt.rows() * prompt.cols() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "prompt is {}x{} but the model takes flattened length {}",
                prompt.rows(),
                prompt.cols(),
                self.in_dim
            )));
        }
        if !prompt.is_finite() {
            return Err(Error::InvalidArgument(
                "prompt has non-finite entries".into(),
            ));
        }
        let hidden_in = affine(&self.input_w, &self.input_b, prompt.data());
        let (encoded, _) = self.decompose_chain(&hidden_in);
        Ok(affine(&self.output_w, &self.output_b, &encoded))
    }

    /// Full forward pass: logits[n][k] = logit_scale · cos(feature_n, w_k),
    /// then the fixed corruption mixes logit columns. Deterministic.
    pub fn predict_logits(&self, features: &Matrix, prompts: &[Matrix]) -> Result<Matrix> {
        if prompts.len() != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "{} prompts for a {}-class model",
                prompts.len(),
                self.classes
            )));
        }
        if features.cols() != self.feat_dim {
            return Err(Error::ShapeMismatch(format!(
                "features have dim {} but the model serves D_f = {}",
                features.cols(),
                self.feat_dim
            )));
        }
        let mut weights = Vec::with_capacity(self.classes);
        for prompt in prompts {
            weights.push(self.text_encode(prompt)?);
        }
        let weight_norms: Vec<f64> = weights.iter().map(|w| norm(w)).collect();

        let n = features.rows();
        let mut raw = Matrix::zeros(n, self.classes);
        for i in 0..n {
            let feat = features.row(i);
            let feat_norm = norm(feat);
            for k in 0..self.classes {
                let denom = feat_norm * weight_norms[k];
                // Zero vectors have no direction; define their cosine as 0.
                let cos = if denom > 0.0 {
                    dot(feat, &weights[k]) / denom
                } else {
                    0.0
                };
                raw[(i, k)] = self.logit_scale * cos;
            }
        }

        // Column mixing: corrupted row = corruption · raw row.
        let mut out = Matrix::zeros(n, self.classes);
        for i in 0..n {
            for k in 0..self.classes {
                let mut sum = 0.0;
                for j in 0..self.classes {
                    sum += self.corruption[(k, j)] * raw[(i, j)];
                }
                out[(i, k)] = sum;
            }
        }
        Ok(out)
    }
}

/// Fixed corruption used by generated tasks: a convex blend of the identity
/// and a cyclic class shift, M = (1−γ)·I + γ·Π. Rows sum to 1, and the blend
/// stays invertible for γ < 0.5, so the mapping is learnable but not
/// information-destroying. The shift amount is drawn from `seed`.
pub fn corruption_matrix(classes: usize, strength: f64, seed: u64) -> Result<Matrix> {
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "corruption needs at least 2 classes".into(),
        ));
    }
    if !(0.0..0.5).contains(&strength) {
        return Err(Error::InvalidArgument(format!(
            "corruption strength must be in [0, 0.5) to stay invertible, got {strength}"
        )));
    }
    let mut rng = SeededRng::new(mix_seed(seed, 0xC0_44_u64));
    let shift = 1 + rng.next_below(classes as u64 - 1) as usize;
    let mut m = Matrix::zeros(classes, classes);
    for i in 0..classes {
        m[(i, i)] += 1.0 - strength;
        m[(i, (i + shift) % classes)] += strength;
    }
    Ok(m)
}
