//! Exact solution of the coupled affine-hull quadratic program
//!
//! ```text
//! min  mu ||X a - Y b||² + l1 ||a||² + l2 ||b||²   s.t.  Σa = 1, Σb = 1
//! ```
//!
//! through its KKT system. This is the reference the iterative ADMM solver is
//! checked against.

use super::matrix::{self, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `||X alpha - Y beta||²`
    pub distance: f64,
    /// Lagrange multipliers of `Σα = 1` and `Σβ = 1`, in the sign convention
    /// `∇f + ν e = 0`.
    pub multipliers: (f64, f64),
}

/// Squared distance between the two affine combinations.
pub fn combination_distance(x: &Matrix, y: &Matrix, alpha: &[f64], beta: &[f64]) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::dims(format!(
            "feature dimensions differ: {} vs {}",
            x.rows(),
            y.rows()
        )));
    }
    let vx = x.matvec(alpha)?;
    let vy = y.matvec(beta)?;
    Ok(matrix::norm_sq(&matrix::sub(&vx, &vy)))
}

/// `mu ||Xα − Yβ||² + l1 ||α||² + l2 ||β||²`
pub fn qp_objective(
    x: &Matrix,
    y: &Matrix,
    mu: f64,
    l1: f64,
    l2: f64,
    alpha: &[f64],
    beta: &[f64],
) -> Result<f64> {
    let d = combination_distance(x, y, alpha, beta)?;
    Ok(mu * d + l1 * matrix::norm_sq(alpha) + l2 * matrix::norm_sq(beta))
}

pub(crate) fn check_pair_inputs(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::dims(format!(
            "feature dimensions differ: {} vs {}",
            x.rows(),
            y.rows()
        )));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("set features".into()));
    }
    Ok(())
}

pub fn kkt_qp_solve(x: &Matrix, y: &Matrix, mu: f64, l1: f64, l2: f64) -> Result<QpSolution> {
    check_pair_inputs(x, y)?;
    for (name, v) in [("mu", mu), ("lambda1", l1), ("lambda2", l2)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    let (m, n) = (x.cols(), y.cols());
    let size = m + n + 2;

    let xx = x.tr_matmul(x)?;
    let xy = x.tr_matmul(y)?;
    let yy = y.tr_matmul(y)?;

    // [ H  Aᵀ ] [z]   [0]
    // [ A  0  ] [ν] = [1]
    let mut k = Matrix::zeros(size, size);
    for i in 0..m {
        for j in 0..m {
            k[(i, j)] = 2.0 * mu * xx[(i, j)];
        }
        k[(i, i)] += 2.0 * l1;
        for j in 0..n {
            k[(i, m + j)] = -2.0 * mu * xy[(i, j)];
            k[(m + j, i)] = -2.0 * mu * xy[(i, j)];
        }
        k[(i, m + n)] = 1.0;
        k[(m + n, i)] = 1.0;
    }
    for i in 0..n {
        for j in 0..n {
            k[(m + i, m + j)] = 2.0 * mu * yy[(i, j)];
        }
        k[(m + i, m + i)] += 2.0 * l2;
        k[(m + i, m + n + 1)] = 1.0;
        k[(m + n + 1, m + i)] = 1.0;
    }
    let mut rhs = vec![0.0; size];
    rhs[m + n] = 1.0;
    rhs[m + n + 1] = 1.0;

    let z = gauss_solve(k, rhs).ok_or(Error::SingularKkt)?;
    let alpha = z[..m].to_vec();
    let beta = z[m..m + n].to_vec();
    let distance = combination_distance(x, y, &alpha, &beta)?;
    Ok(QpSolution {
        alpha,
        beta,
        distance,
        multipliers: (z[m + n], z[m + n + 1]),
    })
}

/// Gaussian elimination with partial pivoting. `None` when a pivot falls
/// below `1e-13` times the largest entry.
pub(crate) fn gauss_solve(mut a: Matrix, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = a.rows();
    debug_assert_eq!(a.cols(), n);
    debug_assert_eq!(b.len(), n);
    let tiny = 1e-13 * a.max_abs();
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if a[(r, col)].abs() > a[(piv, col)].abs() {
                piv = r;
            }
        }
        let p = a[(piv, col)].abs();
        if p.is_nan() || p <= tiny {
            return None;
        }
        if piv != col {
            for c in 0..n {
                let t = a[(col, c)];
                a[(col, c)] = a[(piv, c)];
                a[(piv, c)] = t;
            }
            b.swap(col, piv);
        }
        let p = a[(col, col)];
        for r in (col + 1)..n {
            let f = a[(r, col)] / p;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[(r, c)] -= f * a[(col, c)];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for c in (i + 1)..n {
            s -= a[(i, c)] * x[c];
        }
        x[i] = s / a[(i, i)];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
