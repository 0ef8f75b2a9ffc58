//! Plain (tape-free) forms of the residual base learners and fusion.

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::math::{dot, sigmoid, softmax_weights, DenseMatrix, MathError, SpdFactor};
use crate::models::SharedPredictor;

/// Encoded support with residual targets, plus encoded queries.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTask {
    pub support_enc: DenseMatrix,
    pub residuals: Vec<f64>,
    pub query_enc: DenseMatrix,
    pub query_labels: Vec<u8>,
}

/// `Δy = y − σ(Ψ(x))` per support instance.
pub fn residual_targets(psi: &SharedPredictor, support: &[&Instance]) -> Result<Vec<f64>> {
    let logits = psi.logits(support)?;
    Ok(residuals_from_logits(support, &logits))
}

pub(crate) fn residuals_from_logits(support: &[&Instance], logits: &[f64]) -> Vec<f64> {
    support
        .iter()
        .zip(logits)
        .map(|(x, &z)| x.y() - sigmoid(z))
        .collect()
}

/// `g(v₁, v₂) = wᵀ|v₁ − v₂| + b` with the elementwise absolute difference.
pub fn nn_similarity(w: &[f64], b: f64, v1: &[f64], v2: &[f64]) -> Result<f64> {
    if v1.len() != v2.len() || w.len() != v1.len() {
        return Err(MathError::Shape {
            op: "nn_similarity",
            left: (1, v1.len()),
            right: (w.len(), v2.len()),
        }
        .into());
    }
    Ok(crate::math::abs_sim(v1, v2, w, b))
}

/// Softmax attention weights of each query row over the support rows.
pub fn attention(w: &[f64], b: f64, support_enc: &DenseMatrix, query_enc: &DenseMatrix) -> Result<DenseMatrix> {
    if support_enc.rows() == 0 {
        return Err(Error::InvalidData("attention over an empty support set".into()));
    }
    let mut alpha = DenseMatrix::zeros(query_enc.rows(), support_enc.rows());
    for i in 0..query_enc.rows() {
        let sims = (0..support_enc.rows())
            .map(|j| nn_similarity(w, b, query_enc.row(i), support_enc.row(j)))
            .collect::<Result<Vec<_>>>()?;
        alpha.row_mut(i).copy_from_slice(&softmax_weights(&sims));
    }
    Ok(alpha)
}

/// `Δŷ = Σᵢ αᵢ Δyᵢ` for every query row.
pub fn nn_predict(w: &[f64], b: f64, task: &ResidualTask) -> Result<Vec<f64>> {
    weighted_targets(w, b, &task.support_enc, &task.residuals, &task.query_enc)
}

pub(crate) fn weighted_targets(
    w: &[f64],
    b: f64,
    support_enc: &DenseMatrix,
    targets: &[f64],
    query_enc: &DenseMatrix,
) -> Result<Vec<f64>> {
    let alpha = attention(w, b, support_enc, query_enc)?;
    Ok((0..alpha.rows()).map(|i| dot(alpha.row(i), targets)).collect())
}

/// Closed-form ridge weights through the `|S|×|S|` system:
/// `w* = Φᵀ(ΦΦᵀ + λI)⁻¹Δy`.
pub fn rr_fit(lambda: f64, support_enc: &DenseMatrix, residuals: &[f64]) -> Result<Vec<f64>> {
    if support_enc.rows() == 0 {
        return Err(Error::InvalidData("ridge fit on an empty support set".into()));
    }
    if residuals.len() != support_enc.rows() {
        return Err(MathError::Shape {
            op: "rr_fit",
            left: support_enc.shape(),
            right: (residuals.len(), 1),
        }
        .into());
    }
    let mut gram = support_enc.matmul_nt(support_enc)?;
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) + lambda);
    }
    let a = SpdFactor::new(&gram)?.solve(&DenseMatrix::column(residuals))?;
    Ok(support_enc.matmul_tn(&a)?.into_data())
}

/// `Δŷ = Φ(x_q)ᵀ w*` per query row.
pub fn rr_predict(weights: &[f64], query_enc: &DenseMatrix) -> Result<Vec<f64>> {
    if query_enc.cols() != weights.len() {
        return Err(MathError::Shape {
            op: "rr_predict",
            left: query_enc.shape(),
            right: (weights.len(), 1),
        }
        .into());
    }
    Ok((0..query_enc.rows()).map(|i| dot(query_enc.row(i), weights)).collect())
}

/// `σ(Ψ(x) + β·Δŷ)`
#[inline]
pub fn fuse(psi_logit: f64, beta: f64, delta: f64) -> f64 {
    sigmoid(psi_logit + beta * delta)
}

/// MUS: query probability as the attention-weighted mean of support labels.
pub fn mus_predict(
    w: &[f64],
    b: f64,
    support_enc: &DenseMatrix,
    support_labels: &[u8],
    query_enc: &DenseMatrix,
) -> Result<Vec<f64>> {
    let y: Vec<f64> = support_labels.iter().map(|&l| f64::from(l)).collect();
    weighted_targets(w, b, support_enc, &y, query_enc)
}
