//! Rank-one-projection matrix sensing and nuclear-norm minimisation.
//!
//! Measurements are `t_k = a_k^T W b_k`. The recovery program is
//!
//! ```text
//! minimise ||W||_*  subject to  a_k^T W b_k = t_k  for all k
//! ```
//!
//! solved by ADMM with a singular-value-thresholding step and an affine
//! projection whose `m x m` Gram system is solved by conjugate gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `m` rank-one sensing pairs with their measurements. The sensing matrices
/// `a_k b_k^T` are never formed.
#[derive(Debug, Clone)]
pub struct RopSystem {
    /// Row `k` is `a_k` (`m x d1`).
    left: DMatrix<f64>,
    /// Row `k` is `b_k` (`m x d2`).
    right: DMatrix<f64>,
    measurements: DVector<f64>,
}

impl RopSystem {
    pub fn new(
        pairs: &[(DVector<f64>, DVector<f64>)],
        measurements: DVector<f64>,
    ) -> Result<Self> {
        let m = pairs.len();
        if m == 0 {
            return Err(Error::InvalidInput("a sensing system needs at least one pair".into()));
        }
        let d1 = pairs[0].0.len();
        let d2 = pairs[0].1.len();
        if d1 == 0 || d2 == 0 {
            return Err(Error::InvalidInput("sensing vectors must be non-empty".into()));
        }
        if pairs.iter().any(|(a, b)| a.len() != d1 || b.len() != d2) {
            return Err(Error::Shape("all sensing pairs must share a shape".into()));
        }
        if measurements.len() != m {
            return Err(Error::Shape(format!(
                "{m} pairs but {} measurements",
                measurements.len()
            )));
        }
        if measurements.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("measurements must be finite".into()));
        }
        Ok(Self {
            left: DMatrix::from_fn(m, d1, |k, i| pairs[k].0[i]),
            right: DMatrix::from_fn(m, d2, |k, j| pairs[k].1[j]),
            measurements,
        })
    }

    pub fn len(&self) -> usize {
        self.left.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.left.ncols(), self.right.ncols())
    }

    pub fn measurements(&self) -> &DVector<f64> {
        &self.measurements
    }

    pub fn left(&self, k: usize) -> DVector<f64> {
        self.left.row(k).transpose()
    }

    pub fn right(&self, k: usize) -> DVector<f64> {
        self.right.row(k).transpose()
    }

    /// The Gram matrix of the operator, `(a_k.a_l)(b_k.b_l)`.
    pub fn gram(&self) -> DMatrix<f64> {
        let ga = &self.left * self.left.transpose();
        let gb = &self.right * self.right.transpose();
        ga.component_mul(&gb)
    }
}

/// `(a_k^T W b_k)_k`.
pub fn apply_operator(system: &RopSystem, w: &DMatrix<f64>) -> Result<DVector<f64>> {
    if w.shape() != system.shape() {
        return Err(Error::Shape(format!(
            "matrix is {:?}, operator expects {:?}",
            w.shape(),
            system.shape()
        )));
    }
    // Row k of (A W) dotted with row k of B.
    let aw = &system.left * w;
    Ok(DVector::from_fn(system.len(), |k, _| {
        aw.row(k).dot(&system.right.row(k))
    }))
}

/// `sum_k z_k a_k b_k^T`.
pub fn apply_adjoint(system: &RopSystem, z: &DVector<f64>) -> Result<DMatrix<f64>> {
    if z.len() != system.len() {
        return Err(Error::Shape(format!(
            "vector has length {}, operator has {} measurements",
            z.len(),
            system.len()
        )));
    }
    let mut weighted = system.right.clone();
    for (k, zk) in z.iter().enumerate() {
        weighted.row_mut(k).scale_mut(*zk);
    }
    Ok(system.left.transpose() * weighted)
}

/// Soft-thresholds the singular values of `m` by `theta`.
pub fn singular_value_threshold(m: &DMatrix<f64>, theta: f64) -> Result<DMatrix<f64>> {
    if !(theta >= 0.0) {
        return Err(Error::InvalidInput(format!("threshold must be >= 0, got {theta}")));
    }
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Numerical("SVD factors missing".into()));
    };
    let shrunk = svd.singular_values.map(|s| (s - theta).max(0.0));
    let mut us = u;
    for (c, s) in shrunk.iter().enumerate() {
        us.column_mut(c).scale_mut(*s);
    }
    Ok(us * v_t)
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().sum()
}

/// Singular values above `rel_cutoff * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_cutoff: f64) -> usize {
    let sv = m.singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel_cutoff * max).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Augmented-Lagrangian penalty.
    pub rho: f64,
    pub max_iters: usize,
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub rank_hint: Option<usize>,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    #[serde(default)]
    pub preconditioner: Preconditioner,
}

/// Preconditioner for the inner conjugate-gradient solves with the Gram
/// matrix of the measurement operator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    None,
    /// Inverse diagonal of the Gram matrix.
    Jacobi,
    /// Cholesky factor of the Gram matrix, computed once per solve. Falls
    /// back to Jacobi when the Gram matrix is not positive definite.
    #[default]
    Cholesky,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iters: 5000,
            primal_tol: 1e-8,
            dual_tol: 1e-8,
            rank_hint: None,
            cg_max_iters: 200,
            cg_tol: 1e-10,
            preconditioner: Preconditioner::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !(self.primal_tol > 0.0) || !(self.dual_tol > 0.0) {
            return Err(Error::InvalidInput(
                "rho and tolerances must be positive".into(),
            ));
        }
        if self.max_iters == 0 || self.cg_max_iters == 0 {
            return Err(Error::InvalidInput("iteration caps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// `||A(W) - t|| / max(1, ||t||)` at the returned iterate.
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub numerical_rank: usize,
    pub nuclear_norm: f64,
    pub cg_iterations: usize,
}

/// Conjugate gradients for a symmetric positive semi-definite system,
/// warm-started from `x`. Returns the iteration count.
pub fn conjugate_gradient(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &mut DVector<f64>,
    max_iters: usize,
    tol: f64,
) -> usize {
    preconditioned_conjugate_gradient(a, b, x, |r| r.clone(), max_iters, tol)
}

/// Preconditioned conjugate gradients; `m_inv` applies the inverse of the
/// preconditioner. Stops on the unpreconditioned residual
/// `||b - A x|| <= tol ||b||`.
pub fn preconditioned_conjugate_gradient(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &mut DVector<f64>,
    m_inv: impl Fn(&DVector<f64>) -> DVector<f64>,
    max_iters: usize,
    tol: f64,
) -> usize {
    let target = tol * b.norm().max(1e-300);
    let mut r = b - a * &*x;
    if r.norm() <= target {
        return 0;
    }
    let mut z = m_inv(&r);
    let mut rz = r.dot(&z);
    let mut p = z.clone();
    for it in 1..=max_iters {
        let ap = a * &p;
        let curvature = p.dot(&ap);
        if curvature <= 0.0 || rz <= 0.0 {
            return it;
        }
        let step = rz / curvature;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        if r.norm() <= target {
            return it;
        }
        z = m_inv(&r);
        let rz_next = r.dot(&z);
        p = &z + &p * (rz_next / rz);
        rz = rz_next;
    }
    max_iters
}

/// ADMM for nuclear-norm minimisation under the measurement constraints.
///
/// Iterates `X = P(Z - U)`, `Z = svt(X + U, 1/rho)`, `U += X - Z`, where `P`
/// projects onto the affine constraint set. The problem is rescaled so the
/// measurements have unit root-mean-square before iterating. The low-rank
/// iterate `Z` is returned; when `max_iters` is hit, the iterate with the
/// smallest primal residual is returned with `converged = false`.
pub fn solve_nuclear_min(
    system: &RopSystem,
    config: &SolverConfig,
) -> Result<(DMatrix<f64>, SolverDiagnostics)> {
    config.validate()?;
    let (d1, d2) = system.shape();
    let m = system.len();
    let t_norm = system.measurements.norm();
    let scale = if t_norm > 0.0 { t_norm / (m as f64).sqrt() } else { 1.0 };
    let t = &system.measurements / scale;
    let t_denominator = (t_norm / scale).max(1.0);

    let gram = system.gram();
    let theta = 1.0 / config.rho;
    let diagonal = gram.diagonal().map(|g| if g > 0.0 { 1.0 / g } else { 1.0 });
    let cholesky = match config.preconditioner {
        Preconditioner::Cholesky => gram.clone().cholesky(),
        _ => None,
    };
    let m_inv = |r: &DVector<f64>| -> DVector<f64> {
        match (&cholesky, config.preconditioner) {
            (Some(c), _) => c.solve(r),
            (None, Preconditioner::None) => r.clone(),
            (None, _) => r.component_mul(&diagonal),
        }
    };

    let mut z = DMatrix::zeros(d1, d2);
    let mut u = DMatrix::zeros(d1, d2);
    let mut multiplier = DVector::zeros(m);
    let mut best: Option<(f64, DMatrix<f64>, f64)> = None;
    let mut cg_total = 0;
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;

    for iter in 1..=config.max_iters {
        // Affine projection of Z - U.
        let target = &z - &u;
        let residual = apply_operator(system, &target)? - &t;
        cg_total += preconditioned_conjugate_gradient(
            &gram,
            &residual,
            &mut multiplier,
            &m_inv,
            config.cg_max_iters,
            config.cg_tol,
        );
        let x = target - apply_adjoint(system, &multiplier)?;

        let z_next = singular_value_threshold(&(&x + &u), theta)?;
        u += &x - &z_next;

        primal = (apply_operator(system, &z_next)? - &t).norm() / t_denominator;
        dual = config.rho * (&z_next - &z).norm() / z_next.norm().max(1.0);
        z = z_next;

        if primal < config.primal_tol && dual < config.dual_tol {
            let w = &z * scale;
            let diagnostics = SolverDiagnostics {
                converged: true,
                iterations: iter,
                primal_residual: primal,
                dual_residual: dual,
                numerical_rank: numerical_rank(&w, 1e-8),
                nuclear_norm: nuclear_norm(&w),
                cg_iterations: cg_total,
            };
            return Ok((w, diagnostics));
        }
        if best.as_ref().is_none_or(|(p, _, _)| primal < *p) {
            best = Some((primal, z.clone(), dual));
        }
    }

    let (primal, z, dual) = best.unwrap_or((primal, z, dual));
    let w = z * scale;
    let diagnostics = SolverDiagnostics {
        converged: false,
        iterations: config.max_iters,
        primal_residual: primal,
        dual_residual: dual,
        numerical_rank: numerical_rank(&w, 1e-8),
        nuclear_norm: nuclear_norm(&w),
        cg_iterations: cg_total,
    };
    Ok((w, diagnostics))
}
