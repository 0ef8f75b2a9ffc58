use super::{DenseMatrix, MathError};

/// Probability clamp applied before taking logs in [`bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Forward product plus a closure-free adjoint: returns `C = A·B`.
/// Use [`matmul_backward`] for `(dA, dB)` given `dC`.
pub fn matmul_fwd_bwd(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, MathError> {
    a.matmul(b)
}

/// Adjoints of `C = A·B`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward(
    a: &DenseMatrix,
    b: &DenseMatrix,
    dc: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix), MathError> {
    if dc.shape() != (a.rows(), b.cols()) {
        return Err(MathError::Shape {
            op: "matmul_backward",
            left: (a.rows(), b.cols()),
            right: dc.shape(),
        });
    }
    Ok((dc.matmul_nt(b)?, a.matmul_tn(dc)?))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy of one prediction; `p` is clamped to `[ε, 1−ε]`.
#[inline]
pub fn bce(label: f64, p: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// `∂bce/∂p`; zero where the clamp is active.
#[inline]
pub fn bce_grad(label: f64, p: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    -label / p + (1.0 - label) / (1.0 - p)
}

/// Softmax over a slice, max-shifted.
pub fn softmax_weights(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Adjoint of softmax: `dx = α ⊙ (dα − ⟨dα, α⟩)`.
pub fn softmax_backward(alpha: &[f64], d_alpha: &[f64]) -> Vec<f64> {
    let inner: f64 = alpha.iter().zip(d_alpha).map(|(a, d)| a * d).sum();
    alpha
        .iter()
        .zip(d_alpha)
        .map(|(a, d)| a * (d - inner))
        .collect()
}
