//! Class-specific collaborative representation distance between two sets.
//!
//! For sets `X` (`D x m`) and `Y` (`D x n`) the pair problem is
//!
//! ```text
//! min  mu ||X a - Y b||² + l1 ||a||² + l2 ||b||²   s.t.  Σa = 1, Σb = 1
//! ```
//!
//! with `mu = mu1` for same-class pairs and `mu = mu2` otherwise. It is solved
//! by ADMM on the augmented Lagrangian
//!
//! ```text
//! f(a, b) + ρ/2 (eᵀa - 1 + η1/ρ)² + ρ/2 (eᵀb - 1 + η2/ρ)²
//! ```
//!
//! alternating exact minimization in `a` (with the previous `b`), then in `b`
//! (with the fresh `a`), then dual ascent on `η1, η2`. The two block systems
//! are factored once per pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    self, all_finite, cholesky_factor, combination_distance, max_abs_diff, CholeskyFactor, Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub mu1: f64,
    pub mu2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
    pub rho: f64,
    pub tol_constraint: f64,
    pub tol_iterate: f64,
    pub max_iters: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            mu1: 0.01,
            mu2: 0.001,
            lambda1: 0.1,
            lambda2: 0.5,
            margin: 2.0,
            rho: 1.0,
            tol_constraint: 1e-8,
            tol_iterate: 1e-11,
            max_iters: 500,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("margin", self.margin),
            ("rho", self.rho),
            ("tol_constraint", self.tol_constraint),
            ("tol_iterate", self.tol_iterate),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// `mu1` for same-class pairs, `mu2` otherwise.
    pub fn mu(&self, label: PairLabel) -> f64 {
        match label {
            PairLabel::Same => self.mu1,
            PairLabel::Different => self.mu2,
        }
    }
}

/// The pair indicator: `Same` is `y = 1`, `Different` is `y = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Same,
    Different,
}

impl PairLabel {
    pub fn indicator(self) -> f64 {
        match self {
            PairLabel::Same => 1.0,
            PairLabel::Different => 0.0,
        }
    }
}

impl From<bool> for PairLabel {
    fn from(same: bool) -> Self {
        if same {
            PairLabel::Same
        } else {
            PairLabel::Different
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub eta1: f64,
    pub eta2: f64,
    pub iteration: usize,
}

impl AdmmState {
    /// Uniform coefficients (already feasible) and zero duals.
    pub fn initial(m: usize, n: usize) -> Self {
        AdmmState {
            alpha: vec![1.0 / m as f64; m],
            beta: vec![1.0 / n as f64; n],
            eta1: 0.0,
            eta2: 0.0,
            iteration: 0,
        }
    }

    pub fn residuals(&self) -> (f64, f64) {
        (
            numkernel::sum(&self.alpha) - 1.0,
            numkernel::sum(&self.beta) - 1.0,
        )
    }
}

/// Per-pair quantities shared by every ADMM iteration.
#[derive(Debug, Clone)]
pub struct AdmmCache {
    mu: f64,
    /// factor of `2μ XᵀX + ρ eeᵀ + 2λ1 I`
    alpha_factor: CholeskyFactor,
    /// factor of `2μ YᵀY + ρ eeᵀ + 2λ2 I`
    beta_factor: CholeskyFactor,
    /// `XᵀY`; its transpose is `YᵀX`
    cross: Matrix,
    cross_t: Matrix,
}

impl AdmmCache {
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn alpha_factor(&self) -> &CholeskyFactor {
        &self.alpha_factor
    }

    pub fn beta_factor(&self) -> &CholeskyFactor {
        &self.beta_factor
    }

    pub fn cross(&self) -> &Matrix {
        &self.cross
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.cross.rows(), self.cross.cols())
    }
}

/// `2μ AᵀA + ρ eeᵀ + 2λ I`
pub fn block_system(a: &Matrix, mu: f64, rho: f64, lambda: f64) -> Result<Matrix> {
    let mut s = a.tr_matmul(a)?.scale(2.0 * mu);
    let k = s.rows();
    for i in 0..k {
        for j in 0..k {
            s[(i, j)] += rho;
        }
        s[(i, i)] += 2.0 * lambda;
    }
    Ok(s)
}

fn check_sets(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.cols() == 0 || y.cols() == 0 {
        return Err(Error::EmptySet("pair member has no columns".into()));
    }
    numkernel::check_pair_inputs(x, y)
}

pub fn build_cache(x: &Matrix, y: &Matrix, label: PairLabel, h: &Hyperparams) -> Result<AdmmCache> {
    check_sets(x, y)?;
    h.validate()?;
    let mu = h.mu(label);
    let factor = |a: &Matrix, lambda: f64| {
        block_system(a, mu, h.rho, lambda)
            .and_then(|s| cholesky_factor(&s))
            .map_err(|e| Error::NumericalFailure(format!("block factorization: {e}")))
    };
    let cross = x.tr_matmul(y)?;
    let cross_t = cross.transpose();
    Ok(AdmmCache {
        mu,
        alpha_factor: factor(x, h.lambda1)?,
        beta_factor: factor(y, h.lambda2)?,
        cross,
        cross_t,
    })
}

/// One Gauss-Seidel sweep followed by the dual update.
pub fn admm_iteration(state: &AdmmState, cache: &AdmmCache, h: &Hyperparams) -> Result<AdmmState> {
    let (m, n) = cache.dims();
    if state.alpha.len() != m || state.beta.len() != n {
        return Err(Error::dims(format!(
            "state ({}, {}) does not match cache ({m}, {n})",
            state.alpha.len(),
            state.beta.len()
        )));
    }
    let two_mu = 2.0 * cache.mu;

    let mut alpha = cache.cross.matvec(&state.beta)?;
    let shift = h.rho - state.eta1;
    for a in alpha.iter_mut() {
        *a = two_mu * *a + shift;
    }
    cache.alpha_factor.solve_in_place(&mut alpha)?;

    let mut beta = cache.cross_t.matvec(&alpha)?;
    let shift = h.rho - state.eta2;
    for b in beta.iter_mut() {
        *b = two_mu * *b + shift;
    }
    cache.beta_factor.solve_in_place(&mut beta)?;

    let eta1 = state.eta1 + h.rho * (numkernel::sum(&alpha) - 1.0);
    let eta2 = state.eta2 + h.rho * (numkernel::sum(&beta) - 1.0);
    Ok(AdmmState {
        alpha,
        beta,
        eta1,
        eta2,
        iteration: state.iteration + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CscrSolution {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `||X alpha - Y beta||²`
    pub distance: f64,
    pub iterations: usize,
    /// `(Σα - 1, Σβ - 1)`
    pub constraint_residuals: (f64, f64),
    pub converged: bool,
}

/// Runs ADMM from the uniform start until both constraint residuals are within
/// `tol_constraint` and the max-norm iterate change is within `tol_iterate`,
/// or `max_iters` is hit. A solve that runs out of iterations is returned with
/// `converged = false`.
pub fn solve_pair(
    x: &Matrix,
    y: &Matrix,
    label: PairLabel,
    h: &Hyperparams,
) -> Result<CscrSolution> {
    let cache = build_cache(x, y, label, h)?;
    let mut state = AdmmState::initial(x.cols(), y.cols());
    // Two singletons: the constraints alone fix alpha = beta = [1].
    if x.cols() == 1 && y.cols() == 1 {
        let distance = combination_distance(x, y, &state.alpha, &state.beta)?;
        return Ok(CscrSolution {
            alpha: state.alpha,
            beta: state.beta,
            distance,
            iterations: 0,
            constraint_residuals: (0.0, 0.0),
            converged: true,
        });
    }
    let mut converged = false;
    while state.iteration < h.max_iters {
        let next = admm_iteration(&state, &cache, h)?;
        if !all_finite(&next.alpha) || !all_finite(&next.beta) {
            return Err(Error::NonFinite(format!(
                "ADMM iterate at iteration {}",
                next.iteration
            )));
        }
        let change =
            max_abs_diff(&next.alpha, &state.alpha).max(max_abs_diff(&next.beta, &state.beta));
        let (ra, rb) = next.residuals();
        state = next;
        if ra.abs() <= h.tol_constraint && rb.abs() <= h.tol_constraint && change <= h.tol_iterate {
            converged = true;
            break;
        }
    }
    let distance = combination_distance(x, y, &state.alpha, &state.beta)?;
    Ok(CscrSolution {
        constraint_residuals: state.residuals(),
        alpha: state.alpha,
        beta: state.beta,
        distance,
        iterations: state.iteration,
        converged,
    })
}

/// Recomputes `||X alpha - Y beta||²` from a solution's coefficients.
pub fn set_distance(x: &Matrix, y: &Matrix, sol: &CscrSolution) -> Result<f64> {
    if sol.alpha.len() != x.cols() || sol.beta.len() != y.cols() {
        return Err(Error::dims(format!(
            "coefficients ({}, {}) for sets with ({}, {}) columns",
            sol.alpha.len(),
            sol.beta.len(),
            x.cols(),
            y.cols()
        )));
    }
    combination_distance(x, y, &sol.alpha, &sol.beta)
}
