//! Prompt construction: a frozen random projection A maps a low-dimensional
//! latent z to a full prompt offset, and per-class sequences append one class
//! embedding each, t_k = [p0 + A·z, c_k].

use crate::error::{Error, Result};
use crate::numerics::{mix_seed, Matrix, SeededRng};

/// Frozen prompt-side geometry: initial prompt p0 (n×d), projection A
/// ((n·d)×d0), and the K class embeddings (rows of a K×d matrix).
///
/// Immutable after construction; all methods are pure.
#[derive(Debug, Clone)]
pub struct PromptSpec {
    p0: Matrix,
    a: Matrix,
    class_embeddings: Matrix,
    n: usize,
    d: usize,
    d0: usize,
}

/// Gaussian random projection with i.i.d. N(0, std²) entries, generated
/// column by column from per-column seeds.
///
/// Column j depends only on (seed, j), so growing d0 appends new columns
/// without disturbing existing ones: the projection for a smaller subspace is
/// a bit-exact prefix of the projection for a larger one under the same seed.
pub fn random_projection(seed: u64, n: usize, d: usize, d0: usize, std: f64) -> Result<Matrix> {
    if n == 0 || d == 0 || d0 == 0 {
        return Err(Error::InvalidArgument(format!(
            "projection dimensions must be positive, got n={n} d={d} d0={d0}"
        )));
    }
    let rows = n * d;
    let mut a = Matrix::zeros(rows, d0);
    for j in 0..d0 {
        let mut col_rng = SeededRng::new(mix_seed(seed, j as u64));
        for i in 0..rows {
            a[(i, j)] = col_rng.next_normal() * std;
        }
    }
    Ok(a)
}

impl PromptSpec {
    /// Builds a spec with a fresh random projection (see [`random_projection`]).
    pub fn new(
        p0: Matrix,
        class_embeddings: Matrix,
        projection_seed: u64,
        d0: usize,
        std: f64,
    ) -> Result<Self> {
        let n = p0.rows();
        let d = p0.cols();
        if class_embeddings.cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "class embeddings have dim {} but prompts have dim {d}",
                class_embeddings.cols()
            )));
        }
        if class_embeddings.rows() == 0 {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        let a = random_projection(projection_seed, n, d, d0, std)?;
        Ok(Self {
            p0,
            a,
            class_embeddings,
            n,
            d,
            d0,
        })
    }

    /// Test constructor: d0 = n·d and A = identity, so the latent IS the
    /// prompt offset and materialize(z) = p0 + reshape(z, n×d).
    pub fn with_identity_projection(p0: Matrix, class_embeddings: Matrix) -> Result<Self> {
        let n = p0.rows();
        let d = p0.cols();
        if class_embeddings.cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "class embeddings have dim {} but prompts have dim {d}",
                class_embeddings.cols()
            )));
        }
        let d0 = n * d;
        Ok(Self {
            p0,
            a: Matrix::identity(d0),
            class_embeddings,
            n,
            d,
            d0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d0(&self) -> usize {
        self.d0
    }

    /// Number of classes K.
    pub fn classes(&self) -> usize {
        self.class_embeddings.rows()
    }

    pub fn projection(&self) -> &Matrix {
        &self.a
    }

    pub fn p0(&self) -> &Matrix {
        &self.p0
    }

    pub fn class_embeddings(&self) -> &Matrix {
        &self.class_embeddings
    }

    /// p0 + reshape(A·z, n×d). Linear in z; z = 0 gives exactly p0.
    pub fn materialize(&self, z: &[f64]) -> Result<Matrix> {
        if z.len() != self.d0 {
            return Err(Error::ShapeMismatch(format!(
                "latent has length {} but subspace dimension is {}",
                z.len(),
                self.d0
            )));
        }
        let offset = self.a.matvec(z)?;
        let mut out = self.p0.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += offset[i];
        }
        Ok(out)
    }

    /// K prompt sequences, each (n+1)×d: the shared materialized prompt on
    /// rows 0..n and class embedding c_k on row n.
    pub fn build_prompts(&self, z: &[f64]) -> Result<Vec<Matrix>> {
        let prompt = self.materialize(z)?;
        stack_class_prompts(&prompt, &self.class_embeddings)
    }
}

/// Stacks one shared prompt block on top of each class embedding row,
/// yielding K sequences of shape (prompt rows + 1)×d.
pub fn stack_class_prompts(prompt: &Matrix, class_embeddings: &Matrix) -> Result<Vec<Matrix>> {
    if class_embeddings.cols() != prompt.cols() {
        return Err(Error::ShapeMismatch(format!(
            "class embeddings have dim {} but the prompt has dim {}",
            class_embeddings.cols(),
            prompt.cols()
        )));
    }
    let n = prompt.rows();
    let d = prompt.cols();
    let mut out = Vec::with_capacity(class_embeddings.rows());
    for class in 0..class_embeddings.rows() {
        let mut seq = Matrix::zeros(n + 1, d);
        for r in 0..n {
            seq.row_mut(r).copy_from_slice(prompt.row(r));
        }
        seq.row_mut(n).copy_from_slice(class_embeddings.row(class));
        out.push(seq);
    }
    Ok(out)
}
