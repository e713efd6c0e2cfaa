//! Synthetic few-shot classification tasks with planted structure, plus
//! their on-disk format.
//!
//! A task hides two recoverable signals:
//!
//! 1. a prompt offset Δ = reshape(A·z*) living in a low-dimensional subspace
//!    of the prompt space — class prototypes are the surrogate's encodings
//!    of [p0+Δ, c_k], so a searcher that finds z* aligns the text side with
//!    the image features, and
//! 2. a fixed mixing of the logit columns ("corruption") that an output-side
//!    refiner can learn to undo.
//!
//! Image features are unit-normalized noisy copies of their class prototype.
//! The generator calibrates every task so the zero-shot prompt scores well
//! above chance but far from perfect, and so both planted signals provably
//! carry headroom (checked against the hidden ground truth on the test set).

use std::fs;
use std::path::Path;

use crate::blackbox::{corruption_matrix, SurrogateModel, SurrogateParams};
use crate::error::{Error, Result};
use crate::numerics::{accuracy, gaussian_matrix, mix_seed, norm, Matrix, SeededRng};
use crate::subspace::{random_projection, stack_class_prompts, PromptSpec};

const TASK_MAGIC: &[u8; 4] = b"CRFT";
const TASK_VERSION: u32 = 1;

/// Default standard deviation of random-projection entries; the learner side
/// uses the same default, which keeps the planted offset reachable.
pub const PROJECTION_STD: f64 = 0.02;

const P0_STD: f64 = 0.5;
const CLASS_EMBED_STD: f64 = 1.0;
const MAX_CALIBRATION_ATTEMPTS: u64 = 64;
const ZERO_SHOT_MIN_ABOVE_CHANCE: f64 = 0.05;
const ZERO_SHOT_MAX: f64 = 0.95;
/// Required test-accuracy gain of the planted prompt over the zero-shot one.
const PROMPT_HEADROOM: f64 = 0.08;
/// Required test-accuracy gain of inverse-mixing the corrupted logits.
const REFINE_HEADROOM: f64 = 0.03;

/// Generation knobs. `seed` drives everything; two calls with equal params
/// produce bit-identical tasks.
#[derive(Debug, Clone)]
pub struct TaskParams {
    pub seed: u64,
    pub classes: usize,
    pub shots: usize,
    /// Prompt length n.
    pub n: usize,
    /// Embedding dimension d.
    pub d: usize,
    /// Image feature dimension D_f.
    pub feat_dim: usize,
    /// Dimension of the planted subspace that the oracle offset lives in.
    pub plant_dim: usize,
    /// Standard deviation of the hidden latent z* driving the offset.
    pub latent_scale: f64,
    /// Per-entry feature noise around the (unit-norm) class prototype.
    pub noise_std: f64,
    /// Logit-mixing strength γ ∈ [0, 0.5); 0 disables corruption.
    pub corruption_strength: f64,
    pub test_per_class: usize,
    /// When false the offset is drawn directly in prompt space instead of
    /// through the projection, so no finite latent reaches it exactly.
    pub reachable: bool,
    /// When false, accept the first candidate without the headroom checks
    /// (needed for deliberately extreme settings like zero noise).
    pub calibrate: bool,
}

impl TaskParams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            classes: 10,
            shots: 16,
            n: 4,
            d: 16,
            feat_dim: 64,
            plant_dim: 8,
            latent_scale: 4.0,
            noise_std: 0.12,
            corruption_strength: 0.35,
            test_per_class: 50,
            reachable: true,
            calibrate: true,
        }
    }
}

/// One generated task: data splits, prompt-side geometry, and the hidden
/// ground truth (oracle offset / latent) used only for diagnostics.
#[derive(Debug, Clone)]
pub struct FewShotTask {
    pub classes: usize,
    pub shots: usize,
    pub n: usize,
    pub d: usize,
    pub feat_dim: usize,
    /// Planted subspace dimension; 0 means the offset is not reachable.
    pub plant_dim: usize,
    pub noise_std: f64,
    pub corruption_strength: f64,
    pub generator_seed: u64,
    pub model_seed: u64,
    pub projection_seed: u64,
    pub corruption_seed: u64,
    pub p0: Matrix,
    pub class_embeddings: Matrix,
    /// Hidden ground truth Δ (n×d).
    pub oracle_offset: Matrix,
    /// Hidden ground truth z* (length `plant_dim`; empty when unreachable).
    pub oracle_latent: Vec<f64>,
    pub features_train: Matrix,
    pub labels_train: Vec<usize>,
    pub features_test: Matrix,
    pub labels_test: Vec<usize>,
}

/// Test-set accuracies against the hidden ground truth.
#[derive(Debug, Clone, Copy)]
pub struct PlantedMetrics {
    /// z = 0 prompt, corrupted logits — the starting point.
    pub zero_shot: f64,
    /// Planted prompt p0+Δ, corrupted logits — what prompt search can reach.
    pub planted: f64,
    /// z = 0 prompt with the corruption inverted — what refinement can reach.
    pub refined_zero_shot: f64,
}

pub fn generate(params: &TaskParams) -> Result<FewShotTask> {
    if params.classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if params.shots == 0 || params.test_per_class == 0 {
        return Err(Error::InvalidArgument("splits must be non-empty".into()));
    }
    if params.n == 0 || params.d == 0 || params.feat_dim == 0 {
        return Err(Error::InvalidArgument(
            "prompt/feature dimensions must be positive".into(),
        ));
    }
    if params.reachable && params.plant_dim == 0 {
        return Err(Error::InvalidArgument(
            "a reachable offset needs plant_dim >= 1".into(),
        ));
    }
    if params.noise_std < 0.0 {
        return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
    }
    if params.corruption_strength != 0.0 && !(0.0..0.5).contains(&params.corruption_strength) {
        return Err(Error::InvalidArgument(
            "corruption_strength must be in [0, 0.5)".into(),
        ));
    }

    let attempts = if params.calibrate {
        MAX_CALIBRATION_ATTEMPTS
    } else {
        1
    };
    let chance = 1.0 / params.classes as f64;
    for attempt in 0..attempts {
        let task = candidate(params, mix_seed(params.seed, 0xA77E + attempt))?;
        if !params.calibrate {
            return Ok(task);
        }
        let m = task.planted_metrics()?;
        let zero_shot_ok =
            m.zero_shot >= chance + ZERO_SHOT_MIN_ABOVE_CHANCE && m.zero_shot <= ZERO_SHOT_MAX;
        let prompt_ok = m.planted >= m.zero_shot + PROMPT_HEADROOM;
        let refine_ok = params.corruption_strength == 0.0
            || m.refined_zero_shot >= m.zero_shot + REFINE_HEADROOM;
        if zero_shot_ok && prompt_ok && refine_ok {
            return Ok(task);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no calibrated task found in {MAX_CALIBRATION_ATTEMPTS} attempts for seed {}; \
         adjust noise_std ({}) / latent_scale ({}) / corruption_strength ({})",
        params.seed, params.noise_std, params.latent_scale, params.corruption_strength
    )))
}

fn candidate(params: &TaskParams, attempt_seed: u64) -> Result<FewShotTask> {
    let (n, d, k) = (params.n, params.d, params.classes);
    let p0 = gaussian_matrix(&mut SeededRng::new(mix_seed(attempt_seed, 1)), n, d, P0_STD);
    let class_embeddings = gaussian_matrix(
        &mut SeededRng::new(mix_seed(attempt_seed, 2)),
        k,
        d,
        CLASS_EMBED_STD,
    );
    let model_seed = mix_seed(attempt_seed, 10);
    let projection_seed = mix_seed(attempt_seed, 11);
    // The corruption is reconstructed from the model seed alone, so a
    // service process needs only (model seed, dims, strength) to serve the
    // identical oracle.
    let corruption_seed = model_seed;

    let (plant_dim, oracle_latent, oracle_offset) = if params.reachable {
        let z = SeededRng::new(mix_seed(attempt_seed, 3))
            .normal_vec(params.plant_dim, params.latent_scale);
        let a = random_projection(projection_seed, n, d, params.plant_dim, PROJECTION_STD)?;
        let offset = Matrix::from_vec(n, d, a.matvec(&z)?)?;
        (params.plant_dim, z, offset)
    } else {
        // Match the magnitude a projected offset would have had, but draw it
        // directly in prompt space.
        let entry_std =
            PROJECTION_STD * params.latent_scale * (params.plant_dim.max(1) as f64).sqrt();
        let offset = gaussian_matrix(
            &mut SeededRng::new(mix_seed(attempt_seed, 5)),
            n,
            d,
            entry_std,
        );
        (0, Vec::new(), offset)
    };

    let mut task = FewShotTask {
        classes: k,
        shots: params.shots,
        n,
        d,
        feat_dim: params.feat_dim,
        plant_dim,
        noise_std: params.noise_std,
        corruption_strength: params.corruption_strength,
        generator_seed: params.seed,
        model_seed,
        projection_seed,
        corruption_seed,
        p0,
        class_embeddings,
        oracle_offset,
        oracle_latent,
        features_train: Matrix::zeros(0, 0),
        labels_train: Vec::new(),
        features_test: Matrix::zeros(0, 0),
        labels_test: Vec::new(),
    };

    // Class prototypes: the surrogate's encodings of the planted prompts,
    // scaled to unit norm so noise_std is directly an SNR knob.
    let model = task.build_model()?;
    let planted_prompts = stack_class_prompts(&task.planted_prompt(), &task.class_embeddings)?;
    let mut prototypes = Matrix::zeros(k, params.feat_dim);
    for class in 0..k {
        let w = model.text_encode(&planted_prompts[class])?;
        let w_norm = norm(&w);
        if !(w_norm > 0.0) {
            return Err(Error::InvalidArgument(
                "degenerate class prototype (zero encoding)".into(),
            ));
        }
        for (dst, &v) in prototypes.row_mut(class).iter_mut().zip(&w) {
            *dst = v / w_norm;
        }
    }

    let mut noise_rng = SeededRng::new(mix_seed(attempt_seed, 4));
    let (features_train, labels_train) =
        sample_split(&prototypes, params.shots, params.noise_std, &mut noise_rng)?;
    let (features_test, labels_test) = sample_split(
        &prototypes,
        params.test_per_class,
        params.noise_std,
        &mut noise_rng,
    )?;
    task.features_train = features_train;
    task.labels_train = labels_train;
    task.features_test = features_test;
    task.labels_test = labels_test;
    Ok(task)
}

/// `per_class` unit-normalized noisy prototype copies per class, labels in
/// class-major order.
fn sample_split(
    prototypes: &Matrix,
    per_class: usize,
    noise_std: f64,
    rng: &mut SeededRng,
) -> Result<(Matrix, Vec<usize>)> {
    let k = prototypes.rows();
    let dim = prototypes.cols();
    let mut features = Matrix::zeros(k * per_class, dim);
    let mut labels = Vec::with_capacity(k * per_class);
    let mut row = 0;
    for class in 0..k {
        for _ in 0..per_class {
            let noise = rng.normal_vec(dim, noise_std);
            let dst = features.row_mut(row);
            for j in 0..dim {
                dst[j] = prototypes[(class, j)] + noise[j];
            }
            let nrm = norm(dst);
            if !(nrm > 0.0) {
                return Err(Error::InvalidArgument("degenerate zero feature".into()));
            }
            for v in dst.iter_mut() {
                *v /= nrm;
            }
            labels.push(class);
            row += 1;
        }
    }
    Ok((features, labels))
}

impl FewShotTask {
    /// p0 + Δ, the prompt realized by the hidden ground truth.
    pub fn planted_prompt(&self) -> Matrix {
        let mut p = self.p0.clone();
        for (v, &o) in p.data_mut().iter_mut().zip(self.oracle_offset.data()) {
            *v += o;
        }
        p
    }

    pub fn surrogate_params(&self) -> Result<SurrogateParams> {
        let mut p = SurrogateParams::new(
            self.model_seed,
            self.n + 1,
            self.d,
            self.feat_dim,
            self.classes,
        );
        if self.corruption_strength > 0.0 {
            p.corruption = Some(corruption_matrix(
                self.classes,
                self.corruption_strength,
                self.corruption_seed,
            )?);
        }
        Ok(p)
    }

    /// The frozen model this task was generated against.
    pub fn build_model(&self) -> Result<SurrogateModel> {
        SurrogateModel::new(&self.surrogate_params()?)
    }

    /// Prompt-side geometry for a learner choosing subspace dimension `d0`.
    /// The projection is regenerated from the recorded seed, so any
    /// d0 ≥ plant_dim contains the planted subspace as a column prefix.
    pub fn prompt_spec(&self, d0: usize, projection_std: f64) -> Result<PromptSpec> {
        PromptSpec::new(
            self.p0.clone(),
            self.class_embeddings.clone(),
            self.projection_seed,
            d0,
            projection_std,
        )
    }

    /// z* zero-padded to the learner's dimension (rescaled if the learner
    /// uses a different projection std). None if the offset is unreachable
    /// at this d0.
    pub fn padded_oracle_latent(&self, d0: usize, projection_std: f64) -> Option<Vec<f64>> {
        if self.plant_dim == 0 || d0 < self.plant_dim || !(projection_std > 0.0) {
            return None;
        }
        let scale = PROJECTION_STD / projection_std;
        let mut z = vec![0.0; d0];
        for (zi, &v) in z.iter_mut().zip(&self.oracle_latent) {
            *zi = v * scale;
        }
        Some(z)
    }

    /// Ground-truth diagnostics on the test split (see [`PlantedMetrics`]).
    pub fn planted_metrics(&self) -> Result<PlantedMetrics> {
        let model = self.build_model()?;
        let zero_shot_prompts = stack_class_prompts(&self.p0, &self.class_embeddings)?;
        let planted_prompts = stack_class_prompts(&self.planted_prompt(), &self.class_embeddings)?;

        let logits_zs = model.predict_logits(&self.features_test, &zero_shot_prompts)?;
        let zero_shot = accuracy(&logits_zs, &self.labels_test)?;
        let logits_planted = model.predict_logits(&self.features_test, &planted_prompts)?;
        let planted = accuracy(&logits_planted, &self.labels_test)?;

        let refined_zero_shot = if self.corruption_strength > 0.0 {
            // The ideal refiner: undo the column mixing exactly.
            let m_inv = model.corruption().inverse()?;
            let n = logits_zs.rows();
            let k = self.classes;
            let mut restored = Matrix::zeros(n, k);
            for i in 0..n {
                for c in 0..k {
                    let mut sum = 0.0;
                    for j in 0..k {
                        sum += m_inv[(c, j)] * logits_zs[(i, j)];
                    }
                    restored[(i, c)] = sum;
                }
            }
            accuracy(&restored, &self.labels_test)?
        } else {
            zero_shot
        };

        Ok(PlantedMetrics {
            zero_shot,
            planted,
            refined_zero_shot,
        })
    }

    /// Serializes the task: little-endian header (magic "CRFT", version,
    /// dims, seeds, scalars), then label blocks as u32 and float blocks in
    /// field order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut b = Vec::new();
        b.extend_from_slice(TASK_MAGIC);
        b.extend_from_slice(&TASK_VERSION.to_le_bytes());
        for dim in [
            self.classes,
            self.shots,
            self.n,
            self.d,
            self.feat_dim,
            self.labels_train.len(),
            self.labels_test.len(),
            self.plant_dim,
        ] {
            b.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for seed in [
            self.generator_seed,
            self.model_seed,
            self.projection_seed,
            self.corruption_seed,
        ] {
            b.extend_from_slice(&seed.to_le_bytes());
        }
        b.extend_from_slice(&self.noise_std.to_le_bytes());
        b.extend_from_slice(&self.corruption_strength.to_le_bytes());
        for &label in self.labels_train.iter().chain(&self.labels_test) {
            b.extend_from_slice(&(label as u32).to_le_bytes());
        }
        for block in [
            self.p0.data(),
            self.class_embeddings.data(),
            self.oracle_offset.data(),
            &self.oracle_latent,
            self.features_train.data(),
            self.features_test.data(),
        ] {
            for v in block {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, b)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format(format!(
                    "task file truncated at byte {} (wanted {n} more)",
                    *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };

        if take(&mut pos, 4)? != TASK_MAGIC {
            return Err(Error::Format("bad task magic (expected CRFT)".into()));
        }
        let version = read_u32(&mut pos)?;
        if version != TASK_VERSION {
            return Err(Error::Format(format!("unsupported task version {version}")));
        }
        let classes = read_u32(&mut pos)? as usize;
        let shots = read_u32(&mut pos)? as usize;
        let n = read_u32(&mut pos)? as usize;
        let d = read_u32(&mut pos)? as usize;
        let feat_dim = read_u32(&mut pos)? as usize;
        let n_train = read_u32(&mut pos)? as usize;
        let n_test = read_u32(&mut pos)? as usize;
        let plant_dim = read_u32(&mut pos)? as usize;

        let read_u64 = |pos: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let generator_seed = read_u64(&mut pos)?;
        let model_seed = read_u64(&mut pos)?;
        let projection_seed = read_u64(&mut pos)?;
        let corruption_seed = read_u64(&mut pos)?;

        let read_f64 = |pos: &mut usize| -> Result<f64> {
            Ok(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let noise_std = read_f64(&mut pos)?;
        let corruption_strength = read_f64(&mut pos)?;

        let read_labels = |pos: &mut usize, count: usize| -> Result<Vec<usize>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let label = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
                if label >= classes {
                    return Err(Error::Format(format!(
                        "label {label} out of range for K = {classes}"
                    )));
                }
                out.push(label);
            }
            Ok(out)
        };
        let labels_train = read_labels(&mut pos, n_train)?;
        let labels_test = read_labels(&mut pos, n_test)?;

        let read_block = |pos: &mut usize, count: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                out.push(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
            }
            Ok(out)
        };
        let p0 = Matrix::from_vec(n, d, read_block(&mut pos, n * d)?)?;
        let class_embeddings = Matrix::from_vec(classes, d, read_block(&mut pos, classes * d)?)?;
        let oracle_offset = Matrix::from_vec(n, d, read_block(&mut pos, n * d)?)?;
        let oracle_latent = read_block(&mut pos, plant_dim)?;
        let features_train =
            Matrix::from_vec(n_train, feat_dim, read_block(&mut pos, n_train * feat_dim)?)?;
        let features_test =
            Matrix::from_vec(n_test, feat_dim, read_block(&mut pos, n_test * feat_dim)?)?;

        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "task file has {} trailing bytes",
                bytes.len() - pos
            )));
        }
        Ok(Self {
            classes,
            shots,
            n,
            d,
            feat_dim,
            plant_dim,
            noise_std,
            corruption_strength,
            generator_seed,
            model_seed,
            projection_seed,
            corruption_seed,
            p0,
            class_embeddings,
            oracle_offset,
            oracle_latent,
            features_train,
            labels_train,
            features_test,
            labels_test,
        })
    }
}
