use nalgebra::{Cholesky, DMatrix, Dyn};

use super::{DenseMatrix, MathError};

const JITTER_BASE: f64 = 1e-8;
const JITTER_ESCALATIONS: usize = 3;

/// Cholesky factor of a symmetric positive-definite matrix, possibly after
/// adding diagonal jitter. Reused for the forward solve and its adjoint.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
    dim: usize,
}

impl SpdFactor {
    /// Factorizes `m`, first as given and then with escalating diagonal
    /// jitter `j₀·10ᵏ`, `j₀ = 1e-8·trace(m)/n`, for `k = 0..=3`.
    pub fn new(m: &DenseMatrix) -> Result<Self, MathError> {
        let n = m.rows();
        if m.cols() != n {
            return Err(MathError::shape("solve_spd", m, m));
        }
        let base = DMatrix::from_row_slice(n, n, m.data());
        if let Some(chol) = Cholesky::new(base.clone()) {
            return Ok(Self {
                chol,
                jitter: 0.0,
                dim: n,
            });
        }
        let mean_diag = if n == 0 { 0.0 } else { m.trace() / n as f64 };
        let mut jitter = JITTER_BASE * if mean_diag > 0.0 { mean_diag } else { 1.0 };
        for _ in 0..=JITTER_ESCALATIONS {
            let mut shifted = base.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                log::debug!("solve_spd: factorized {n}x{n} system with jitter {jitter:e}");
                return Ok(Self {
                    chol,
                    jitter,
                    dim: n,
                });
            }
            jitter *= 10.0;
        }
        Err(MathError::Singular {
            dim: n,
            max_jitter: jitter / 10.0,
            condition: condition_estimate(&base),
        })
    }

    /// Diagonal jitter that was needed; zero for a clean factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix, MathError> {
        if b.rows() != self.dim {
            return Err(MathError::Shape {
                op: "solve_spd",
                left: (self.dim, self.dim),
                right: b.shape(),
            });
        }
        let rhs = DMatrix::from_row_slice(b.rows(), b.cols(), b.data());
        let x = self.chol.solve(&rhs);
        let mut out = DenseMatrix::zeros(b.rows(), b.cols());
        for r in 0..b.rows() {
            for c in 0..b.cols() {
                out.set(r, c, x[(r, c)]);
            }
        }
        Ok(out)
    }
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `M·x = b` for symmetric positive-definite `M` without forming an
/// inverse.
pub fn solve_spd(m: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, MathError> {
    SpdFactor::new(m)?.solve(b)
}

/// Adjoint of `x = M⁻¹b` for symmetric `M`: `db = M⁻¹·dx`,
/// `dM = −sym(db·xᵀ)`.
pub fn solve_spd_adjoint(
    m: &DenseMatrix,
    _b: &DenseMatrix,
    x: &DenseMatrix,
    dx: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix), MathError> {
    let factor = SpdFactor::new(m)?;
    let db = factor.solve(dx)?;
    let dm = symmetric_outer_adjoint(&db, x)?;
    Ok((dm, db))
}

/// `−(db·xᵀ + x·dbᵀ)/2`
pub(crate) fn symmetric_outer_adjoint(
    db: &DenseMatrix,
    x: &DenseMatrix,
) -> Result<DenseMatrix, MathError> {
    let outer = db.matmul_nt(x)?;
    let n = outer.rows();
    let mut dm = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            dm.set(i, j, -0.5 * (outer.get(i, j) + outer.get(j, i)));
        }
    }
    Ok(dm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_identity() {
        let m = DenseMatrix::identity(3).scaled(2.0);
        let b = DenseMatrix::column(&[2.0, 4.0, 6.0]);
        let x = solve_spd(&m, &b).unwrap();
        assert!(x.max_abs_diff(&DenseMatrix::column(&[1.0, 2.0, 3.0])) < 1e-14);
    }

    #[test]
    fn unit_ridge_returns_rhs() {
        let m = DenseMatrix::identity(4);
        let b = DenseMatrix::column(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(solve_spd(&m, &b).unwrap(), b);
    }

    #[test]
    fn adjoint_on_identity() {
        let m = DenseMatrix::identity(3);
        let b = DenseMatrix::column(&[0.3, -1.0, 2.0]);
        let x = solve_spd(&m, &b).unwrap();
        let dx = DenseMatrix::column(&[1.0, 0.0, 0.0]);
        let (dm, db) = solve_spd_adjoint(&m, &b, &x, &dx).unwrap();
        assert_eq!(db, dx);
        // −sym(e₁ xᵀ)
        let expected = DenseMatrix::from_rows(&[
            vec![-0.3, 0.5, -1.0],
            vec![0.5, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0],
        ]);
        assert!(dm.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn adjoint_on_scaled_identity_matches_closed_form() {
        let c = 4.0;
        let m = DenseMatrix::identity(2).scaled(c);
        let b = DenseMatrix::column(&[1.0, 2.0]);
        let x = solve_spd(&m, &b).unwrap();
        let dx = DenseMatrix::column(&[0.5, -1.0]);
        let (dm, db) = solve_spd_adjoint(&m, &b, &x, &dx).unwrap();
        assert!(db.max_abs_diff(&dx.scaled(1.0 / c)) < 1e-15);
        // x = b/c, db = dx/c, dM = −sym(dx bᵀ)/c²
        for i in 0..2 {
            for j in 0..2 {
                let want = -0.5
                    * (dx.get(i, 0) * b.get(j, 0) + dx.get(j, 0) * b.get(i, 0))
                    / (c * c);
                assert!((dm.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn singular_matrix_recovers_with_jitter() {
        // rank one Gram with a tiny ridge: jitter escalation succeeds
        let m = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let f = SpdFactor::new(&m).unwrap();
        assert!(f.jitter() > 0.0);
    }

    #[test]
    fn indefinite_matrix_reports_singular_error() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -5.0]]);
        match SpdFactor::new(&m) {
            Err(MathError::Singular { dim, condition, .. }) => {
                assert_eq!(dim, 2);
                assert!(condition.is_infinite());
            }
            other => panic!("expected singular error, got {:?}", other.map(|f| f.jitter())),
        }
    }
}
