//! Dense matrix substrate: Cholesky factorization, triangular solves and
//! log-determinants for the Gram-matrix work in [`crate::gp`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;

/// Relative jitter applied to the mean diagonal when a factorization fails.
pub const DEFAULT_JITTER_REL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-9;

/// Lower-triangular factor `L` of `A + jitter·I = L·Lᵀ`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    lower: DenseMatrix,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    /// Jitter that was added to the diagonal before factorizing.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: b.nrows(),
            });
        }
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        Ok(x)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: b.len(),
            });
        }
        let mut x = b.clone();
        self.lower.solve_lower_triangular_unchecked_mut(&mut x);
        self.lower.tr_solve_lower_triangular_unchecked_mut(&mut x);
        Ok(x)
    }

    fn solve_in_place(&self, x: &mut DenseMatrix) {
        self.lower.solve_lower_triangular_unchecked_mut(x);
        self.lower.tr_solve_lower_triangular_unchecked_mut(x);
    }

    /// `L⁻¹ b`, the whitened right-hand side.
    pub fn solve_lower(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: b.nrows(),
            });
        }
        let mut x = b.clone();
        self.lower.solve_lower_triangular_unchecked_mut(&mut x);
        Ok(x)
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Explicit inverse `(A + jitter·I)⁻¹`, exactly symmetric.
    pub fn inverse(&self) -> DenseMatrix {
        let n = self.dim();
        let mut linv = DenseMatrix::identity(n, n);
        self.lower.solve_lower_triangular_unchecked_mut(&mut linv);
        let mut inv = linv.tr_mul(&linv);
        symmetrize(&mut inv);
        inv
    }

    /// `L·Lᵀ`, i.e. the factorized matrix including jitter.
    pub fn reconstruct(&self) -> DenseMatrix {
        &self.lower * self.lower.transpose()
    }
}

/// Factorizes `a + jitter·I`.
pub fn cholesky(a: &DenseMatrix, jitter: f64) -> Result<CholeskyFactor> {
    check_symmetric(a)?;
    factorize(a, jitter)
}

/// Factorizes `a`, retrying once with `1e-8 × mean(diag)` jitter on failure.
pub fn cholesky_auto(a: &DenseMatrix) -> Result<CholeskyFactor> {
    check_symmetric(a)?;
    match factorize(a, 0.0) {
        Ok(f) => Ok(f),
        Err(Error::NotPositiveDefinite { .. }) => {
            let n = a.nrows() as f64;
            let mean_diag = a.diagonal().sum() / n;
            factorize(a, DEFAULT_JITTER_REL * mean_diag.abs().max(f64::MIN_POSITIVE))
        }
        Err(e) => Err(e),
    }
}

pub fn solve(factor: &CholeskyFactor, b: &DenseMatrix) -> Result<DenseMatrix> {
    factor.solve(b)
}

pub fn logdet(factor: &CholeskyFactor) -> f64 {
    factor.logdet()
}

fn check_symmetric(a: &DenseMatrix) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.ncols(),
        });
    }
    if n == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(worst));
    }
    Ok(())
}

// Left-looking column Cholesky reading only the lower triangle.
fn factorize(a: &DenseMatrix, jitter: f64) -> Result<CholeskyFactor> {
    let n = a.nrows();
    let mut l = a.lower_triangle();
    if jitter != 0.0 {
        for i in 0..n {
            l[(i, i)] += jitter;
        }
    }
    for j in 0..n {
        if j > 0 {
            let (left, mut right) = l.columns_range_pair_mut(0..j, j..j + 1);
            let row_j = left.row(j).transpose();
            let block = left.rows_range(j..n);
            let mut rcol = right.column_mut(0);
            let mut col = rcol.rows_range_mut(j..n);
            col.gemv(-1.0, &block, &row_j, 1.0);
        }
        let pivot = l[(j, j)];
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        let inv = 1.0 / d;
        for i in (j + 1)..n {
            l[(i, j)] *= inv;
        }
    }
    Ok(CholeskyFactor { lower: l, jitter })
}

/// Replaces `m` by `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DenseMatrix) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DenseMatrix) -> f64 {
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// `D^{-1/2} A D^{-1/2}` with `D = diag(A)`; PSD-ness is preserved, scale removed.
pub fn unit_diagonal(a: &DenseMatrix) -> DenseMatrix {
    let d: Vec<f64> = a.diagonal().iter().map(|v| 1.0 / v.abs().sqrt()).collect();
    DenseMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * d[i] * d[j])
}

pub fn frobenius(a: &DenseMatrix) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
