//! Wire protocol shared by the TCP service and the remote client:
//! newline-delimited JSON, one object per line, one request in flight per
//! connection.
//!
//! Requests:
//!   {"op":"register","handle":…,"n_images":…,"dim":…,"features":[…]}
//!   {"op":"predict","handle":…,"k":…,"rows":…,"cols":…,"prompts":[…]}
//! Responses:
//!   {"ok":true}                                      (register)
//!   {"ok":true,"logits":[…],"used":…,"budget":…}     (predict)
//!   {"ok":false,"error":…}                           (any failure)
//!
//! Floats are serialized as shortest round-trip decimal, so finite f64
//! values survive the wire bit-exactly. Prompt payloads are flattened
//! row-major, K consecutive blocks of rows×cols.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Register {
        handle: String,
        n_images: usize,
        dim: usize,
        features: Vec<f64>,
    },
    Predict {
        handle: String,
        k: usize,
        rows: usize,
        cols: usize,
        prompts: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub used: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
}

impl Response {
    pub fn success() -> Self {
        Self {
            ok: true,
            error: None,
            logits: None,
            used: None,
            budget: None,
        }
    }

    pub fn prediction(logits: Vec<f64>, used: u64, budget: u64) -> Self {
        Self {
            ok: true,
            error: None,
            logits: Some(logits),
            used: Some(used),
            budget: Some(budget),
        }
    }

    pub fn failure(error: impl Into<String>) -> Self {
        Self {
            ok: false,
            error: Some(error.into()),
            logits: None,
            used: None,
            budget: None,
        }
    }
}

/// Rebuilds the feature matrix from a register payload.
pub fn features_matrix(n_images: usize, dim: usize, features: Vec<f64>) -> Result<Matrix> {
    if features.len() != n_images * dim {
        return Err(Error::Protocol(format!(
            "features has length {} but n_images={n_images} dim={dim} implies {}",
            features.len(),
            n_images * dim
        )));
    }
    Matrix::from_vec(n_images, dim, features)
}

/// Rebuilds the K prompt matrices from a predict payload.
pub fn prompt_matrices(
    k: usize,
    rows: usize,
    cols: usize,
    prompts: Vec<f64>,
) -> Result<Vec<Matrix>> {
    if prompts.len() != k * rows * cols {
        return Err(Error::Protocol(format!(
            "prompts has length {} but k={k} rows={rows} cols={cols} implies {}",
            prompts.len(),
            k * rows * cols
        )));
    }
    let block = rows * cols;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        out.push(Matrix::from_vec(
            rows,
            cols,
            prompts[i * block..(i + 1) * block].to_vec(),
        )?);
    }
    Ok(out)
}

/// Flattens K equally-shaped prompt matrices into one predict payload.
pub fn flatten_prompts(prompts: &[Matrix]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let first = prompts
        .first()
        .ok_or_else(|| Error::InvalidArgument("no prompts to send".into()))?;
    let (rows, cols) = (first.rows(), first.cols());
    let mut flat = Vec::with_capacity(prompts.len() * rows * cols);
    for p in prompts {
        if p.rows() != rows || p.cols() != cols {
            return Err(Error::ShapeMismatch(format!(
                "prompt shapes differ: {}x{} vs {rows}x{cols}",
                p.rows(),
                p.cols()
            )));
        }
        flat.extend_from_slice(p.data());
    }
    Ok((prompts.len(), rows, cols, flat))
}
