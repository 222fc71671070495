use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check, measured against the largest
/// entry of the input.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Pivots at or below `PIVOT_FLOOR * max(diag)` are rejected.
pub const PIVOT_FLOOR: f64 = 1e-14;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: Matrix,
}

pub fn cholesky_factor(a: &Matrix) -> Result<CholeskyFactor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dims(format!(
            "cholesky needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("cholesky input".into()));
    }

    let scale = a.max_abs();
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if scale > 0.0 && asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric {
            asymmetry: asym / scale,
        });
    }

    let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(a[(i, i)]));
    let floor = PIVOT_FLOOR * max_diag;

    // Only the lower triangle of `a` is read.
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d.is_nan() || d <= floor || max_diag <= 0.0 {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(CholeskyFactor { lower: l })
}

impl CholeskyFactor {
    pub fn size(&self) -> usize {
        self.lower.rows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// `L Lᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let l = &self.lower;
        l.matmul(&l.transpose()).expect("square factor")
    }

    /// Solves `A s = b` in place by forward then backward substitution.
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<()> {
        let n = self.size();
        if b.len() != n {
            return Err(Error::dims(format!(
                "cholesky solve: factor size {n}, rhs length {}",
                b.len()
            )));
        }
        let l = &self.lower;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[(i, k)] * b[k];
            }
            b[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * b[k];
            }
            b[i] = s / l[(i, i)];
        }
        Ok(())
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }
}

/// Solves `A S = B` column by column.
pub fn cholesky_solve(factor: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    if factor.size() != b.rows() {
        return Err(Error::dims(format!(
            "cholesky solve: factor size {}, rhs {:?}",
            factor.size(),
            b.shape()
        )));
    }
    let cols = b
        .columns()
        .into_iter()
        .map(|mut c| factor.solve_in_place(&mut c).map(|_| c))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_columns(&cols)
}
